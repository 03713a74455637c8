"""Command-line entry point: ``fuselab {gen,train,eval,infer,verify}``.

Every command reads an optional JSON run configuration (``--config``),
applies a preset and command-line overrides, writes the fully resolved
configuration next to its outputs and exits with 0 on success, 1 on invalid
input or a failed verification and 2 when a run aborts.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import metrics as M
from . import tensor as T
from .datagen import (RATIO, DatasetManifest, ImageCube, _atomic_write, extract_patches,
                      make_triple, natural_color, read_cube, rgb_response, split_assignments,
                      synth_scene, upsample_array, write_cube, write_png_preview)
from .errors import ConfigError, ContractError, FuselabError, NonFiniteError, TrainingAborted
from .training import FusionArrays, TrainConfig, fit, params_from_checkpoint
from .u2net import VARIANTS, ModelConfig, u2net_forward

log = logging.getLogger("fuselab")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
RESOLVED_NAME = "resolved_config.json"


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 10
    scene_size: int = 256
    patch: int = 64
    stride: int = 64
    split: tuple = (0.9, 0.1, 0.0)
    blur_sigma: float = 1.7
    noise_std: float = 0.0
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if self.scenes < 1:
            raise ConfigError("data.scenes must be >= 1")
        if self.scene_size % RATIO or self.scene_size < 16:
            raise ConfigError(f"data.scene_size must be >= 16 and divisible by {RATIO}")


@dataclass(frozen=True)
class EvalConfig:
    split: str = "val"
    oracle: bool = False
    full_resolution: bool = False
    block: int = 32
    aem_png: bool = True


@dataclass(frozen=True)
class VerifyConfig:
    suites: Optional[tuple] = None
    inject_fault: Optional[str] = None

    def __post_init__(self):
        if self.suites is not None:
            object.__setattr__(self, "suites", tuple(self.suites))
        if self.inject_fault is not None and self.inject_fault not in T.OP_NAMES:
            raise ConfigError(f"unknown op {self.inject_fault!r} for fault injection")


PRESETS = {
    "wv-like": {
        "model": {"pan_channels": 1, "bands": 8, "width": 32, "head_width": 16},
        "train": {"lr0": 1e-3, "epochs": 360, "batch_size": 16, "halve_every": 100},
        "data": {"scenes": 10, "scene_size": 256, "patch": 64, "stride": 64},
    },
    "cave-like": {
        "model": {"pan_channels": 3, "bands": 31, "width": 64, "head_width": 16},
        "train": {"lr0": 3e-4, "epochs": 500, "batch_size": 8, "halve_every": 50},
        "data": {"scenes": 8, "scene_size": 128, "patch": 64, "stride": 32},
    },
}
DEFAULT_PRESET = "wv-like"

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig,
             "verify": VerifyConfig}
_PATH_KEYS = ("dataset", "checkpoint", "resume", "pan", "lowres", "out")


@dataclass
class RunConfig:
    """Everything a command needs; serializes to and from one JSON document."""

    preset: Optional[str] = DEFAULT_PRESET
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    pan: Optional[str] = None
    lowres: Optional[str] = None
    out: str = "fuselab_out"

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        preset = doc.get("preset", DEFAULT_PRESET)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        kwargs = {"preset": preset}
        base = PRESETS.get(preset, {})
        for name, section in _SECTIONS.items():
            given = doc.get(name) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(section)}
            bad = set(given) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = section(**{**base.get(name, {}), **given})
            except TypeError as exc:
                raise ConfigError(f"bad {name!r} section: {exc}") from exc
        for key in _PATH_KEYS:
            if doc.get(key) is not None:
                kwargs[key] = str(doc[key])
        return cls(**kwargs)

    def to_dict(self):
        doc = {"preset": self.preset}
        for name in _SECTIONS:
            doc[name] = asdict(getattr(self, name))
        doc["data"]["split"] = list(self.data.split)
        if self.verify.suites is not None:
            doc["verify"]["suites"] = list(self.verify.suites)
        for key in _PATH_KEYS:
            doc[key] = getattr(self, key)
        return doc

    def with_overrides(self, seed=None, variant=None, precision=None, out=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, model=cfg.model.with_(seed=seed), train=cfg.train.with_(seed=seed),
                          data=replace(cfg.data, seed=seed))
        if variant is not None:
            cfg = replace(cfg, model=cfg.model.with_(variant=variant))
        if precision is not None:
            cfg = replace(cfg, model=cfg.model.with_(precision=precision))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg

    def write_resolved(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _atomic_write(directory / RESOLVED_NAME,
                      (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode())


def load_run_config(path=None):
    if path is None:
        return RunConfig.from_dict({})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return RunConfig.from_dict(doc)


def _absolute(path, base):
    return None if path is None else str((Path(base) / path).resolve())


# -- commands ----------------------------------------------------------------


def pan_weights(model: ModelConfig):
    if model.pan_channels == 1:
        return np.full(model.bands, 1.0 / model.bands)
    if model.pan_channels == 3:
        return rgb_response(model.bands)
    raise ConfigError(f"guide images must have 1 or 3 channels, got {model.pan_channels}")


def cmd_gen(cfg: RunConfig):
    """Synthesize scenes, degrade them, cut aligned patches and write a manifest."""
    d, m = cfg.data, cfg.model
    out = Path(cfg.out)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    weights = pan_weights(m)
    triples = []
    for i in range(d.scenes):
        scene = synth_scene(d.scene_size, d.scene_size, m.bands, seed=d.seed * 100_003 + i)
        full = make_triple(scene, weights, d.blur_sigma, id=f"scene{i:03d}",
                           seed=d.seed * 100_003 + i, noise_std=d.noise_std)
        triples += extract_patches(full, d.patch, d.stride,
                                   seed=(d.seed * 100_003 + i) if d.shuffle else None)
    tags = split_assignments(len(triples), d.split, d.seed)
    entries = []
    for t, tag in zip(triples, tags):
        entry = {"id": t.id, "split": tag}
        for key in ("A", "B", "X"):
            rel = f"samples/{t.id}_{key}.fcube"
            write_cube(getattr(t, key), out / rel)
            entry[key] = rel
        entries.append(entry)
    X = np.stack([t.X.data for t in triples])
    stats = {"count": len(entries), "bands": m.bands, "pan_channels": m.pan_channels,
             "patch": d.patch, "band_mean": X.mean(axis=(0, 1, 2)).tolist(),
             "splits": {s: tags.count(s) for s in ("train", "val", "test")}}
    manifest = DatasetManifest(entries, stats, out)
    manifest.save(out / "manifest.json")
    cfg = replace(cfg, dataset=str((out / "manifest.json").resolve()))
    cfg.write_resolved(out)
    log.info("wrote %d triples to %s", len(entries), out)
    return manifest


def _load_manifest(cfg):
    if cfg.dataset is None:
        raise ConfigError("no dataset manifest given (set 'dataset' or pass --dataset)")
    return DatasetManifest.read(cfg.dataset)


def cmd_train(cfg: RunConfig):
    manifest = _load_manifest(cfg)
    triples = manifest.load_split("train")
    if not triples:
        raise ConfigError(f"{cfg.dataset} has no training samples")
    t0 = triples[0]
    if t0.A.bands != cfg.model.pan_channels or t0.B.bands != cfg.model.bands:
        raise ConfigError(f"dataset has c={t0.A.bands}, C={t0.B.bands}; model config expects "
                          f"c={cfg.model.pan_channels}, C={cfg.model.bands}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    data = FusionArrays.from_triples(triples, dtype=cfg.model.dtype)
    result = fit(cfg.model, data, cfg.train, out_dir=out, resume=cfg.resume)
    log.info("training finished: final loss %.6g", result.losses[-1] if result.losses else float("nan"))
    return result


def load_model(cfg: RunConfig):
    """Model config and parameters from the configured checkpoint.

    A run config that names a model different from the checkpoint's is an
    incompatibility, except for precision which may be changed freely.
    """
    if cfg.checkpoint is None:
        raise ConfigError("no checkpoint given (set 'checkpoint' or pass --checkpoint)")
    ck = ckpt_io.load(cfg.checkpoint)
    stored = ModelConfig.from_dict(ck.model)
    wanted = cfg.model.with_(precision=stored.precision, seed=stored.seed, zero_head=stored.zero_head)
    if wanted != stored:
        diff = {k: (v, getattr(wanted, k)) for k, v in asdict(stored).items() if getattr(wanted, k) != v}
        raise ConfigError(f"checkpoint {cfg.checkpoint} is incompatible with the run config: "
                          + ", ".join(f"{k} is {a!r} in the checkpoint but {b!r} requested"
                                      for k, (a, b) in sorted(diff.items())))
    model = stored.with_(precision=cfg.model.precision)
    return model, params_from_checkpoint(ck, model)


def fuse(A, B, params, model):
    """One forward pass for a single (H, W, c) / (h, w, C) pair."""
    with T.no_grad():
        O = u2net_forward(A[None], B[None], params, model).data[0]
    return np.clip(O.astype(np.float64), 0.0, 1.0)


def cmd_eval(cfg: RunConfig):
    manifest = _load_manifest(cfg)
    entries = manifest.split(cfg.eval.split)
    if not entries:
        raise ConfigError(f"split {cfg.eval.split!r} of {cfg.dataset} is empty")
    model = params = None
    if not cfg.eval.oracle:
        model, params = load_model(cfg)
    out = Path(cfg.out)
    (out / "aem").mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    reduced, full = M.ReducedResReport(), M.FullResReport()
    for entry in entries:
        t = manifest.load(entry)
        with_gt = t.X is not None and not cfg.eval.full_resolution
        if cfg.eval.oracle:
            if t.X is None:
                raise ConfigError(f"oracle evaluation needs ground truth; {t.id} has none")
            O = t.X.data.astype(np.float64)
        else:
            O = fuse(t.A.data, t.B.data, params, model)
        if with_gt:
            peak = 1.0
            reduced.add(t.id, M.reduced_metrics(O, t.X.data, peak=peak, block=cfg.eval.block))
            err = M.aem(O, t.X.data)
            write_cube(err, out / "aem" / f"{t.id}_aem.fcube")
            if cfg.eval.aem_png:
                M.write_aem_png(err, out / "aem" / f"{t.id}_aem.png")
        else:
            rep = M.qnr_suite(O, t.A.data, t.B.data, block=cfg.eval.block, sample_id=t.id)
            full.rows += rep.rows
    written = {}
    for rep, stem in ((reduced, "metrics_reduced"), (full, "metrics_full")):
        if rep.rows:
            _atomic_write(out / f"{stem}.json", rep.to_json().encode())
            _atomic_write(out / f"{stem}.csv", rep.to_csv().encode())
            written[stem] = rep
    return written


def cmd_infer(cfg: RunConfig):
    if cfg.pan is None or cfg.lowres is None:
        raise ConfigError("infer needs both --pan and --lowres FCUBE paths")
    model, params = load_model(cfg)
    A, B = read_cube(cfg.pan), read_cube(cfg.lowres)
    O = ImageCube(fuse(A.data, B.data, params, model), bit_depth_origin=B.bit_depth_origin,
                  band_labels=B.band_labels)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    write_cube(O, out / "O.fcube")
    preview = O if O.bands in (1, 3) else natural_color(O)
    write_png_preview(preview, out / "O.png")
    return O


def cmd_verify(cfg: RunConfig, out=None):
    from .verify import run_verify

    verdict = run_verify(suites=cfg.verify.suites, seed=cfg.model.seed,
                         inject_fault=cfg.verify.inject_fault)
    text = json.dumps(verdict, indent=2) + "\n"
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(out)
        _atomic_write(Path(out) / "verdict.json", text.encode())
    return verdict, text


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--precision", choices=sorted(T.DTYPES))
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="fuselab", description="Pansharpening / HISR fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="synthesize a dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    p.add_argument("--full-resolution", action="store_true", help="ignore ground truth, report QNR")
    p = sub.add_parser("infer", parents=[common], help="fuse one A/B pair")
    p.add_argument("--checkpoint")
    p.add_argument("--pan", help="FCUBE guide image A")
    p.add_argument("--lowres", help="FCUBE low-resolution cube B")
    p = sub.add_parser("verify", parents=[common], help="run the self-verification suites")
    p.add_argument("--suite", action="append", dest="suites")
    p.add_argument("--inject-fault", metavar="OP", choices=T.OP_NAMES,
                   help="corrupt one op's backward rule")
    return parser


def resolve_config(args):
    cfg = load_run_config(args.config)
    if args.preset is not None:
        doc = cfg.to_dict() if args.config is None else json.loads(Path(args.config).read_text())
        doc["preset"] = args.preset
        cfg = RunConfig.from_dict(doc)
    cfg = cfg.with_overrides(args.seed, args.variant, args.precision, args.out)
    base = Path(args.config).parent if args.config else Path.cwd()
    updates = {}
    for key in ("dataset", "checkpoint", "resume", "pan", "lowres"):
        flag = getattr(args, key, None)
        value = flag if flag is not None else getattr(cfg, key)
        updates[key] = _absolute(value, Path.cwd() if flag is not None else base)
    cfg = replace(cfg, **updates)
    ev = cfg.eval
    if getattr(args, "split", None):
        ev = replace(ev, split=args.split)
    if getattr(args, "oracle", False):
        ev = replace(ev, oracle=True)
    if getattr(args, "full_resolution", False):
        ev = replace(ev, full_resolution=True)
    vf = cfg.verify
    if getattr(args, "suites", None):
        vf = replace(vf, suites=tuple(args.suites))
    if getattr(args, "inject_fault", None):
        vf = replace(vf, inject_fault=args.inject_fault)
    return replace(cfg, eval=ev, verify=vf)


def _thread_limit():
    value = os.environ.get("FUSELAB_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"FUSELAB_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        with _thread_limit():
            if args.command == "gen":
                cmd_gen(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "eval":
                for stem, rep in cmd_eval(cfg).items():
                    agg = rep.aggregate()
                    print(stem + ": " + ", ".join(f"{k}={m:.6g}" for k, (m, _) in agg.items()))
            elif args.command == "infer":
                cmd_infer(cfg)
            elif args.command == "verify":
                verdict, text = cmd_verify(cfg, args.out)
                sys.stdout.write(text)
                return EXIT_OK if verdict["passed"] else EXIT_INVALID
    except (TrainingAborted, NonFiniteError, ContractError, FloatingPointError) as exc:
        print(f"fuselab: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (FuselabError, ValueError, FileNotFoundError) as exc:
        print(f"fuselab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"fuselab: I/O failure: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
