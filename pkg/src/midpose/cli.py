"""Command line entry point: ``midpose <command> [options]``.

Commands: synth, render-dmasks, train (stage1 | stage2), eval, label, lowdata.
Exit status is 0 on success, 2 for invalid configuration or arguments and
1 for any other failure; failures print a single ``error:`` line to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import datasets, formats, labeler, posenet
from .binning import make_binspec
from .errors import ConfigurationError, MidposeError
from .silhouette import DmaskSet, generate_dmasks
from .tensorkit import TrainConfig

log = logging.getLogger("midpose")

LOWDATA_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class ConfigError(Exception):
    """Invalid configuration or arguments (exit status 2)."""


@dataclass
class RunConfig:
    """Settings shared by all commands; JSON keys mirror the field names.

    Relative paths are resolved against the directory of the config file.
    ``stage1`` and ``stage2`` hold :class:`TrainConfig` fields and ``synth``
    holds :class:`datasets.SynthConfig` fields.
    """

    dataset: Path | None = None
    out_dir: Path | None = None
    dmask_dir: Path | None = None
    scene: Path | None = None
    stage1_checkpoint: Path | None = None
    stage2_checkpoint: Path | None = None
    seed: int = 0
    az_bins: int = 9
    az_overlap_deg: float = 2.5
    el_bins: int = 5
    el_overlap_deg: float = 0.0
    train_fraction: float = 0.75
    eval_split: str = "test"
    use_stage2: bool = False
    label_stride: int = 4
    min_visible_corners: int = labeler.MIN_VISIBLE_CORNERS
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig = field(default_factory=TrainConfig)
    synth: datasets.SynthConfig = field(default_factory=datasets.SynthConfig)

    _PATHS = ("dataset", "out_dir", "dmask_dir", "scene", "stage1_checkpoint", "stage2_checkpoint")

    @classmethod
    def from_dict(cls, doc, base_dir=Path(".")):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {}
        try:
            for k, v in doc.items():
                if k in cls._PATHS:
                    kw[k] = None if v is None else (Path(base_dir) / v).resolve()
                elif k in ("stage1", "stage2"):
                    kw[k] = _sub_config(TrainConfig, v, k)
                elif k == "synth":
                    kw[k] = _sub_config(datasets.SynthConfig, v, k)
                else:
                    kw[k] = v
            cfg = cls(**kw)
        except (TypeError, ValueError, ConfigurationError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(doc, path.parent)

    def validate(self):
        for name in ("seed", "az_bins", "el_bins", "label_stride", "min_visible_corners"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.eval_split not in ("train", "test", "all"):
            raise ConfigError("eval_split must be train, test or all")
        if not isinstance(self.use_stage2, bool):
            raise ConfigError("use_stage2 must be true or false")
        try:
            self.az_spec(), self.el_spec()
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from None

    def az_spec(self):
        return make_binspec(self.az_bins, self.az_overlap_deg, 360.0, True)

    def el_spec(self):
        return make_binspec(self.el_bins, self.el_overlap_deg, 90.0, False)

    def with_seed(self, seed):
        """Override every seed (run, both training stages, synthetic data)."""
        self.seed = seed
        self.stage1 = dataclasses.replace(self.stage1, seed=seed)
        self.stage2 = dataclasses.replace(self.stage2, seed=seed)
        self.synth = dataclasses.replace(self.synth, seed=seed)
        return self


def _sub_config(cls, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(unknown))}")
    return cls(**value)


# ---------------------------------------------------------------------------
# helpers

def _require(cfg, name):
    v = getattr(cfg, name)
    if v is None:
        raise ConfigError(f"{name} is not set (config file or command line)")
    return v


def _out_dir(cfg):
    out = _require(cfg, "out_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers():
    raw = os.environ.get("POSE_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"POSE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("POSE_THREADS must be >= 1")
    return n


def _split(cfg, anns):
    return datasets.make_split([a.sample_id for a in anns], cfg.train_fraction, cfg.seed)


def _select(anns, ids):
    ids = set(ids)
    return [a for a in anns if a.sample_id in ids]


def _train_annotations(cfg, anns, fraction):
    split = _split(cfg, anns)
    if fraction < 1.0:
        cats = {a.sample_id: a.category for a in anns}
        return _select(anns, datasets.subsample_fraction(split, fraction, cfg.seed, cats).train)
    return _select(anns, split.train)


def _eval_annotations(cfg, anns):
    if cfg.eval_split == "all":
        return list(anns)
    split = _split(cfg, anns)
    return _select(anns, split.test if cfg.eval_split == "test" else split.train)


def _dmask_library(cfg, meshes, workers):
    az, el = cfg.az_spec(), cfg.el_spec()
    lib = {}
    for mesh_id, mesh in sorted(meshes.items()):
        if cfg.dmask_dir is not None and (cfg.dmask_dir / mesh_id).is_dir():
            lib[mesh_id] = DmaskSet.load(cfg.dmask_dir, mesh_id, az, el)
        else:
            lib[mesh_id] = generate_dmasks(mesh, az, el, workers=workers)
    return lib


def _write_text(path, text):
    formats.atomic_write_bytes(path, text.encode())


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_stage1(cfg, train_samples, progress=True):
    net = posenet.Stage1Net(cfg.az_bins, cfg.el_bins, cfg.stage1.dropout_p, cfg.stage1.seed)
    data = posenet.Stage1Data.from_samples(train_samples)
    report = (lambda s: log.info("stage1 epoch %d loss %.4f acc %.3f", s.epoch, s.train_loss, s.train_acc)) \
        if progress else None
    hist = posenet.train_stage1(net, data, cfg.az_spec(), cfg.el_spec(), cfg.stage1, progress=report)
    return net, hist


def lowdata_svg(rows):
    """Small line plot of azimuth accuracy against training fraction."""
    w, h, pad = 320, 240, 40
    xs = [pad + (w - 2 * pad) * r[0] for r in rows]
    ys = [h - pad - (h - 2 * pad) * r[1] / 100.0 for r in rows]
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    marks = "".join(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3"/>' for x, y in zip(xs, ys))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>'
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>'
            f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle" font-size="12">training fraction</text>'
            f'<text x="12" y="{h / 2}" font-size="12" transform="rotate(-90 12 {h / 2})" '
            f'text-anchor="middle">azimuth accuracy (%)</text>'
            f'<polyline points="{pts}" fill="none" stroke="steelblue"/>{marks}</svg>\n')


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg, args):
    out = _require(cfg, "out_dir")
    path = datasets.synth_generate(cfg.synth, out)
    print(path)
    return 0


def cmd_render_dmasks(cfg, args):
    _, meshes = datasets.load_dataset(_require(cfg, "dataset"))
    target = cfg.dmask_dir or _out_dir(cfg)
    target.mkdir(parents=True, exist_ok=True)
    workers = _workers()
    for mesh_id, mesh in sorted(meshes.items()):
        generate_dmasks(mesh, cfg.az_spec(), cfg.el_spec(), workers=workers).save(target)
    print(target)
    return 0


def cmd_train(cfg, args):
    out = _out_dir(cfg)
    anns, meshes = datasets.load_dataset(_require(cfg, "dataset"))
    train = datasets.load_samples(_train_annotations(cfg, anns, args.fraction))
    if args.stage == "stage1":
        net, hist = _train_stage1(cfg, train)
        ckpt = args.checkpoint or cfg.stage1_checkpoint or out / "stage1.pnv"
    else:
        s1_path = cfg.stage1_checkpoint or out / "stage1.pnv"
        stage1 = posenet.load_checkpoint(s1_path)
        lib = _dmask_library(cfg, meshes, _workers())
        pairs = posenet.build_stage2_pairs(posenet.Stage1Data.from_samples(train), train, lib,
                                           cfg.az_spec(), cfg.el_spec(), cfg.seed, stage1)
        net = posenet.Stage2Net(cfg.stage2.seed)
        hist = posenet.train_stage2(net, stage1, posenet.Stage2Data.from_samples(train), pairs, cfg.stage2,
                                    progress=lambda s: log.info("stage2 epoch %d loss %.4f acc %.3f",
                                                                s.epoch, s.train_loss, s.train_acc))
        ckpt = args.checkpoint or cfg.stage2_checkpoint or out / "stage2.pnv"
    posenet.save_checkpoint(ckpt, net)
    _write_json(out / f"history_{args.stage}.json", hist.to_dict())
    print(ckpt)
    return 0


def cmd_eval(cfg, args):
    out = _out_dir(cfg)
    anns, meshes = datasets.load_dataset(_require(cfg, "dataset"))
    stage1 = posenet.load_checkpoint(args.checkpoint or cfg.stage1_checkpoint or out / "stage1.pnv")
    if stage1.kind != "stage1":
        raise ConfigError("the --checkpoint for eval must be a stage-1 network")
    samples = datasets.load_samples(_eval_annotations(cfg, anns))
    kw = {}
    if cfg.use_stage2:
        kw["stage2"] = posenet.load_checkpoint(cfg.stage2_checkpoint or out / "stage2.pnv")
        kw["dmask_library"] = _dmask_library(cfg, meshes, _workers())
        kw["gallery"] = posenet.Gallery.from_samples(
            datasets.load_samples(_train_annotations(cfg, anns, 1.0)))
    report = posenet.evaluate(stage1, samples, cfg.az_spec(), cfg.el_spec(), **kw)
    _write_text(out / "report.csv", report.to_csv())
    print(out / "report.csv")
    return 0


def cmd_label(cfg, args):
    out = _out_dir(cfg)
    frames, boxes = labeler.load_scene(_require(cfg, "scene"))
    results = []
    for box in boxes:
        results += labeler.label_poses(box, frames, cfg.min_visible_corners)
    counts = labeler.export_labels(results, out / "labels.jsonl")
    cloud = labeler.fuse_pointcloud(frames, cfg.label_stride)
    formats.save_tensor(out / "pointcloud.mlt", cloud)
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_lowdata(cfg, args):
    out = _out_dir(cfg)
    anns, _ = datasets.load_dataset(_require(cfg, "dataset"))
    test = datasets.load_samples(_eval_annotations(cfg, anns))
    rows = []
    for frac in LOWDATA_FRACTIONS:
        train = datasets.load_samples(_train_annotations(cfg, anns, frac))
        net, _ = _train_stage1(cfg, train)
        rep = posenet.evaluate(net, test, cfg.az_spec(), cfg.el_spec())
        log.info("fraction %.2f: %d training samples, azimuth %.2f", frac, len(train), rep.az_acc)
        rows.append((frac, rep.az_acc, rep.el_acc))
    text = "fraction,az_acc,el_acc\n" + "".join(f"{f:.2f},{a:.2f},{e:.2f}\n" for f, a, e in rows)
    _write_text(out / "lowdata.csv", text)
    if args.emit_plot:
        _write_text(out / "lowdata.svg", lowdata_svg(rows))
    print(out / "lowdata.csv")
    return 0


COMMANDS = {"synth": cmd_synth, "render-dmasks": cmd_render_dmasks, "train": cmd_train,
            "eval": cmd_eval, "label": cmd_label, "lowdata": cmd_lowdata}


def _fraction(text):
    try:
        f = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < f <= 1:
        raise argparse.ArgumentTypeError("fraction must be in (0, 1]")
    return f


def _seed(text):
    try:
        s = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return s


def build_parser():
    parser = argparse.ArgumentParser(prog="midpose", description="Object viewpoint estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, dataset=True):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=_seed, help="override every seed in the configuration")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        if dataset:
            p.add_argument("--dataset", type=Path, help="dataset directory (overrides dataset)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, dataset=False)
    p.add_argument("--n-samples", type=int, help="number of samples (overrides synth.n_samples)")

    p = sub.add_parser("render-dmasks", help="render the D-mask set of every mesh in a dataset")
    common(p)

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("stage", choices=("stage1", "stage2"))
    common(p)
    p.add_argument("--checkpoint", type=Path, help="where to write the trained network")
    p.add_argument("--fraction", type=_fraction, default=1.0, help="fraction of the training split to use")

    p = sub.add_parser("eval", help="write report.csv with per-category accuracy")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="stage-1 checkpoint to evaluate")
    p.add_argument("--stage2", type=Path, help="stage-2 checkpoint; enables candidate verification")

    p = sub.add_parser("label", help="label object poses in an RGB-D scene")
    common(p, dataset=False)
    p.add_argument("--scene", type=Path, help="scene manifest (overrides scene)")

    p = sub.add_parser("lowdata", help="accuracy against training-set fraction")
    common(p)
    p.add_argument("--emit-plot", action="store_true", help="also write lowdata.svg")
    return parser


def _resolve(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out_dir = args.out.resolve()
    if getattr(args, "dataset", None) is not None:
        cfg.dataset = args.dataset.resolve()
    if getattr(args, "scene", None) is not None:
        cfg.scene = args.scene.resolve()
    if getattr(args, "stage2", None) is not None:
        cfg.stage2_checkpoint = args.stage2.resolve()
        cfg.use_stage2 = True
    if args.command == "synth" and args.n_samples is not None:
        try:
            cfg.synth = dataclasses.replace(cfg.synth, n_samples=args.n_samples)
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from None
    for name in ("checkpoint",):
        if getattr(args, name, None) is not None:
            setattr(args, name, getattr(args, name).resolve())
    return cfg


def _setup_logging(cfg, verbose, log_file=True):
    root = logging.getLogger("midpose")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    if verbose:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(h)
    # timestamps only ever go to run.log, so the other outputs stay reproducible
    if log_file and cfg.out_dir is not None:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        h = logging.FileHandler(cfg.out_dir / "run.log")
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        workers = _workers()
        # synth owns its whole output directory
        _setup_logging(cfg, args.verbose, log_file=args.command != "synth")
        with threadpool_limits(limits=workers):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MidposeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the one-line contract for unexpected failures too
        print(f"error: internal {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(logging.getLogger("midpose").handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger("midpose").removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
