"""Batch command-line front end.

One command is one process.  Every run that writes a primary output also
emits a JSON manifest (command line, resolved configs, seed, input/output
hashes, wall time, git describe) sufficient to re-execute it exactly.
Recordings and patch grids stream through stdin/stdout when a path is "-",
so stages compose as shell pipelines.

Heavy imports happen inside `main` after --threads is applied, because the
BLAS thread count must be pinned before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict

log = logging.getLogger("fome")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _apply_threads(argv: list[str]) -> None:
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in _THREAD_VARS:
        os.environ.setdefault(var, threads)


def _configure_logging() -> None:
    level = os.environ.get("FOME_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _sha256(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return _sha256(fh.read())


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class _Manifest:
    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.started = time.time()
        self.doc = {
            "command": argv,
            "config": {},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": {},
            "git_describe": _git_describe(),
        }
        self._path = getattr(args, "manifest", None)
        self._default_anchor = None

    def add_config(self, name: str, payload) -> None:
        self.doc["config"][name] = payload

    def add_input(self, name: str, payload: bytes) -> None:
        self.doc["inputs"][name] = _sha256(payload)

    def add_output(self, path: str) -> None:
        if path == "-":
            return
        self.doc["outputs"][path] = _sha256_file(path)
        if self._default_anchor is None:
            self._default_anchor = path

    def write(self) -> None:
        self.doc["wall_time_s"] = round(time.time() - self.started, 6)
        self.doc["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        path = self._path
        if path is None and self._default_anchor is not None:
            path = self._default_anchor + ".manifest.json"
        if path is None:
            return
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("manifest written to %s", path)


def _read_bytes(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path: str, payload: bytes) -> None:
    if path == "-":
        sys.stdout.buffer.write(payload)
        sys.stdout.buffer.flush()
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def _write_text(path: str, payload: str) -> None:
    if path == "-":
        sys.stdout.write(payload)
    else:
        with open(path, "w") as fh:
            fh.write(payload)


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _parse_components(raw: str | None, channels: int):
    from .signal_store import Component

    if raw is None:
        # default content: one tone per channel, staggered frequencies
        return [Component(c, 8.0 + 2.0 * c, 20.0, 0.0) for c in range(channels)]
    if raw.strip() == "":
        return []
    comps = []
    for item in raw.split(","):
        parts = item.split(":")
        if len(parts) != 4:
            raise argparse.ArgumentTypeError(
                f"component {item!r} must be channel:freq_hz:amplitude:phase_rad"
            )
        comps.append(Component(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
    return comps


def _cmd_synth(args, manifest: _Manifest) -> None:
    from .signal_store import SyntheticSpec, generate_synthetic, recording_to_bytes, write_recording

    spec = SyntheticSpec(
        channels=args.channels,
        duration_s=args.duration,
        sample_rate_hz=args.rate,
        seed=args.seed,
        components=_parse_components(args.components, args.channels),
        noise_std=args.noise,
    )
    recording = generate_synthetic(spec)
    manifest.add_config("synthetic", {
        "channels": spec.channels, "duration_s": spec.duration_s,
        "sample_rate_hz": spec.sample_rate_hz, "seed": spec.seed,
        "noise_std": spec.noise_std, "components": [list(c) for c in spec.components],
    })
    if args.format == "binary":
        _write_bytes(args.out, recording_to_bytes(recording))
    else:
        if args.out == "-":
            raise argparse.ArgumentTypeError("csv output requires a file path")
        write_recording(recording, args.out, format="csv")
    manifest.add_output(args.out)


def _preprocess_config(args):
    from .preprocess import PreprocessConfig

    lo, hi = (float(s) for s in args.band.split(":"))
    return PreprocessConfig(
        notch_hz=float(args.notch),
        band_lo_hz=lo,
        band_hi_hz=hi,
        target_rate_hz=args.rate,
        window_len_samples=args.window,
    )


def _cmd_preprocess(args, manifest: _Manifest) -> None:
    from .preprocess import grid_to_bytes, preprocess_pipeline
    from .signal_store import read_recording, recording_from_bytes

    if args.format == "csv":
        recording = read_recording(args.infile, format="csv")
        manifest.add_input(args.infile, open(args.infile, "rb").read())
    else:
        payload = _read_bytes(args.infile)
        manifest.add_input(args.infile, payload)
        recording = recording_from_bytes(payload, source=args.infile)
    cfg = _preprocess_config(args)
    grid = preprocess_pipeline(recording, cfg, patch_len=args.patch)
    manifest.add_config("preprocess", asdict(cfg))
    _write_bytes(args.out, grid_to_bytes(grid))
    manifest.add_output(args.out)
    log.info("grid: C=%d P=%d L=%d", grid.n_channels, grid.n_patches, grid.patch_len)


def _cmd_spectra(args, manifest: _Manifest) -> None:
    from .preprocess import grid_from_bytes
    from .spectral import band_powers

    payload = _read_bytes(args.infile)
    manifest.add_input(args.infile, payload)
    grid = grid_from_bytes(payload, source=args.infile)
    tensor = band_powers(grid, taper=args.taper)
    c, p, n = tensor.values.shape
    rows = tensor.values.reshape(c * p, n)
    text = "\n".join(",".join(f"{v!r}" for v in row) for row in rows) + "\n"
    _write_text(args.out, text)
    manifest.add_config("spectra", {"taper": args.taper, "channels": c, "patches": p})
    manifest.add_output(args.out)


def _model_config(args):
    from . import model

    cfg = model.preset(args.preset)
    if args.scale:
        from dataclasses import replace
        cfg = replace(cfg, attn_scale=args.scale)
    for name in args.ablate or []:
        cfg = model.apply_ablation(cfg, name)
    return cfg


def _fit_config_to_data(cfg, patch_len: int, needed_patches: int):
    """Presets fix the architecture dims; patch geometry follows the data."""
    from dataclasses import replace

    changes = {}
    if cfg.patch_len != patch_len:
        changes["patch_len"] = patch_len
    if cfg.max_patches < needed_patches:
        changes["max_patches"] = needed_patches
    if cfg.conv_embed and patch_len % cfg.conv_kernel != 0:
        for k in (10, 5, 4, 2, 1):
            if patch_len % k == 0:
                changes["conv_kernel"] = k
                break
    if changes:
        log.info("adapting model config to data: %s", changes)
        cfg = replace(cfg, **changes)
    return cfg


def _train_config(args, **overrides):
    from .trainer import TrainConfig

    fields = dict(
        seed=args.seed,
        mask_ratio=args.mask_ratio,
        mask_mode=args.mask_mode,
        loss_scope="all" if args.loss_all else "masked_only",
        batch_size=args.batch,
        grad_accum=args.accum,
    )
    if args.lr_peak is not None:
        fields.update(lr_peak=args.lr_peak, lr_init=args.lr_peak / 25.0,
                      lr_final=args.lr_peak / 10_000.0)
    fields.update(overrides)
    return TrainConfig(**fields)


def _split_into_samples(grid, patches_per_sample: int):
    from .errors import ConfigError
    from .preprocess import PatchGrid

    n = grid.n_patches // patches_per_sample
    if n == 0:
        raise ConfigError(
            f"grid has {grid.n_patches} patches; need >= {patches_per_sample} per sample"
        )
    return [
        PatchGrid(
            grid.patches[:, i * patches_per_sample : (i + 1) * patches_per_sample],
            grid.patch_len,
            grid.source_rate_hz,
        )
        for i in range(n)
    ]


def _load_grids(paths: list[str], manifest: _Manifest):
    from .preprocess import grid_from_bytes

    grids = []
    for path in paths:
        payload = _read_bytes(path)
        manifest.add_input(path, payload)
        grids.append(grid_from_bytes(payload, source=path))
    return grids


def _init_params(args, model_cfg):
    from . import model

    if args.checkpoint:
        return model.load_params(args.checkpoint, model_cfg)
    return model.ParameterStore.initialize(model_cfg, args.seed)


def _cmd_pretrain(args, manifest: _Manifest) -> None:
    from . import model, trainer

    model_cfg = _model_config(args)
    corpus = []
    for grid in _load_grids(args.infile, manifest):
        corpus.extend(_split_into_samples(grid, args.pps))
    model_cfg = _fit_config_to_data(model_cfg, corpus[0].patch_len, args.pps)
    train_cfg = _train_config(args)
    if args.steps >= 2:
        train_cfg = trainer.scale_schedule(train_cfg, args.steps)
    params = (
        model.load_params(args.checkpoint, model_cfg)
        if args.checkpoint
        else model.ParameterStore.initialize(model_cfg, args.seed)
    )
    trace = trainer.pretrain(corpus, params, model_cfg, train_cfg, steps=args.steps)
    model.save_params(params, args.out)
    model.write_model_config(model_cfg, args.out + ".config")
    trace_path = args.trace or (args.out + ".trace.csv")
    trainer.write_loss_trace(trace, trace_path)
    manifest.add_config("model", asdict(model_cfg))
    manifest.add_config("train", asdict(train_cfg))
    manifest.add_config("samples", len(corpus))
    manifest.add_output(args.out)
    manifest.add_output(args.out + ".config")
    manifest.add_output(trace_path)
    log.info("final loss %.6f over %d samples", trace[-1][2], len(corpus))


def _read_dataset_manifest(path: str, manifest: _Manifest):
    """CSV rows `grid-path,label[,split]`; paths are relative to the CSV."""
    import csv

    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            grid_path = row[0] if os.path.isabs(row[0]) else os.path.join(base, row[0])
            label = int(row[1]) if len(row) > 1 and row[1] != "" else None
            split = row[2].strip() if len(row) > 2 else None
            rows.append((grid_path, label, split))
    manifest.add_input(path, open(path, "rb").read())
    return rows


def _cmd_finetune(args, manifest: _Manifest) -> None:
    from . import model, trainer
    from .rng import Rng

    model_cfg = _model_config(args)
    train_cfg = _train_config(args)

    if args.task == "classify":
        rows = _read_dataset_manifest(args.manifest_csv, manifest)
        dataset = []
        explicit: dict[str, list[int]] = {"train": [], "val": [], "test": []}
        for i, (grid_path, label, split) in enumerate(rows):
            grid = _load_grids([grid_path], manifest)[0]
            dataset.append((grid, label))
            if split in explicit:
                explicit[split].append(i)
        has_split_column = any(explicit.values())
        splits = (
            (explicit["train"], explicit["val"], explicit["test"])
            if has_split_column else None
        )
        first = dataset[0][0]
        model_cfg = _fit_config_to_data(model_cfg, first.patch_len, first.n_patches)
        params = _init_params(args, model_cfg)
        report = trainer.finetune_classify(
            dataset, params, model_cfg, train_cfg,
            n_classes=args.classes, steps=args.steps, mode=args.mode,
            checkpoint_dir=args.checkpoint_dir, splits=splits,
        )
    elif args.task == "forecast":
        grids = _load_grids(args.infile, manifest)
        samples = []
        for grid in grids:
            samples.extend(
                trainer.forecast_samples_from_grid(grid, args.context, args.horizon)
            )
        model_cfg = _fit_config_to_data(model_cfg, grids[0].patch_len, args.context)
        params = _init_params(args, model_cfg)
        report = trainer.finetune_forecast(
            samples, params, model_cfg, train_cfg,
            horizon_patches=args.horizon, steps=args.steps, mode=args.mode,
            checkpoint_dir=args.checkpoint_dir,
        )
    else:  # impute
        grids = _load_grids(args.infile, manifest)
        corpus = []
        for grid in grids:
            corpus.extend(_split_into_samples(grid, args.pps))
        model_cfg = _fit_config_to_data(model_cfg, corpus[0].patch_len, args.pps)
        params = _init_params(args, model_cfg)
        samples = trainer.make_impute_samples(
            corpus, args.missing_ratio, Rng(args.seed).split(17)
        )
        report = trainer.impute(samples, params, model_cfg, train_cfg, steps=args.steps)

    if args.out_checkpoint:
        model.save_params(params, args.out_checkpoint)
    _write_text(args.out, report.to_json() + "\n")
    manifest.add_config("model", asdict(model_cfg))
    manifest.add_config("train", asdict(train_cfg))
    manifest.add_config("task", args.task)
    manifest.add_output(args.out)
    if args.out_checkpoint:
        manifest.add_output(args.out_checkpoint)


def _cmd_eval(args, manifest: _Manifest) -> None:
    import csv

    from .trainer import compute_metrics

    payload = _read_bytes(args.infile)
    manifest.add_input(args.infile, payload)
    rows = list(csv.reader(payload.decode("utf-8").splitlines()))
    if not rows:
        raise ValueError("empty predictions file")
    body = rows if _is_numeric_row(rows[0]) else rows[1:]
    if args.task == "classify":
        preds = [int(float(r[0])) for r in body]
        refs = [int(float(r[1])) for r in body]
        n_classes = args.classes or (max(max(preds), max(refs)) + 1)
        report = compute_metrics(preds, labels=refs, n_classes=n_classes)
    else:
        preds = [float(r[0]) for r in body]
        refs = [float(r[1]) for r in body]
        report = compute_metrics(preds, targets=refs)
    _write_text(args.out, report.to_json() + "\n")
    manifest.add_output(args.out)


def _is_numeric_row(row: list[str]) -> bool:
    try:
        [float(v) for v in row]
        return True
    except ValueError:
        return False


def _cmd_inspect_checkpoint(args, manifest: _Manifest) -> None:
    from .numerics import load_checkpoint

    arrays = load_checkpoint(args.infile)
    manifest.add_input(args.infile, open(args.infile, "rb").read())
    listing = {name: list(arr.shape) for name, arr in arrays.items()}
    if args.json:
        _write_text(args.out, json.dumps(listing, indent=2) + "\n")
    else:
        width = max(len(n) for n in listing) if listing else 0
        lines = [f"{name:<{width}}  {tuple(shape)}" for name, shape in listing.items()]
        total = sum(int(arr.size) for arr in arrays.values())
        lines.append(f"{len(listing)} tensors, {total} scalars")
        _write_text(args.out, "\n".join(lines) + "\n")
    manifest.add_output(args.out)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")
    p.add_argument("--manifest", default=None, help="explicit manifest path")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("tiny", "base", "large"), default="tiny")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=0.40)
    p.add_argument("--mask-mode", dest="mask_mode", choices=("slot", "column"), default="slot")
    p.add_argument("--loss-all", dest="loss_all", action="store_true")
    p.add_argument("--scale", choices=("d", "dk"), default=None)
    p.add_argument("--ablate", action="append",
                   choices=("freq", "temporal", "channel", "conv-embed"))
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--accum", type=int, default=4)
    p.add_argument("--lr-peak", dest="lr_peak", type=float, default=None,
                   help="override peak lr (init=peak/25, final=peak/1e4)")
    p.add_argument("--checkpoint", default=None, help="initialize from this checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fome", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic recording")
    _add_common(p)
    p.add_argument("--out", default="-")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--rate", type=float, default=500.0)
    p.add_argument("--noise", type=float, default=5.0)
    p.add_argument("--components", default=None,
                   help="channel:freq:amp:phase[,...]; default staggered tones")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("preprocess", help="condition a recording into a patch grid")
    _add_common(p)
    p.add_argument("--in", dest="infile", default="-")
    p.add_argument("--out", default="-")
    p.add_argument("--notch", type=float, choices=(50.0, 60.0), default=50.0)
    p.add_argument("--band", default="0.5:100.5")
    p.add_argument("--rate", type=float, default=250.0)
    p.add_argument("--window", type=int, default=1500)
    p.add_argument("--patch", type=int, default=None, help="patch length (default window)")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("spectra", help="eight-band log powers per patch as CSV")
    _add_common(p)
    p.add_argument("--in", dest="infile", default="-")
    p.add_argument("--out", default="-")
    p.add_argument("--taper", choices=("none", "hann"), default="none")
    p.set_defaults(fn=_cmd_spectra)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--in", dest="infile", nargs="*", default=["-"])
    p.add_argument("--out", default="checkpoint.fckp")
    p.add_argument("--trace", default=None, help="loss trace CSV path")
    p.add_argument("--pps", type=int, default=15, help="patches per sample")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for a downstream task")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("task", choices=("classify", "forecast", "impute"))
    p.add_argument("--in", dest="infile", nargs="*", default=[])
    p.add_argument("--dataset", dest="manifest_csv", default=None,
                   help="labeled dataset manifest CSV (classify)")
    p.add_argument("--out", default="-", help="metrics JSON path")
    p.add_argument("--out-checkpoint", dest="out_checkpoint", default=None)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir", default=None,
                   help="directory for cadence + best-validation checkpoints")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--mode", choices=("full", "probe"), default="full")
    p.add_argument("--context", type=int, default=15)
    p.add_argument("--horizon", type=int, default=2, choices=(2, 5))
    p.add_argument("--missing-ratio", dest="missing_ratio", type=float, default=0.40)
    p.add_argument("--pps", type=int, default=15)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="score a predictions CSV")
    _add_common(p)
    p.add_argument("--in", dest="infile", default="-")
    p.add_argument("--out", default="-")
    p.add_argument("--task", choices=("classify", "regress"), default="classify")
    p.add_argument("--classes", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="list checkpoint tensors")
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_inspect_checkpoint)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import FomeError

    manifest = _Manifest(args, argv)
    try:
        args.fn(args, manifest)
        manifest.write()
    except (FomeError, IndexError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
