"""Command-line entry point: ``ctmae <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as E
from . import model as M
from . import preprocess as P
from . import synth
from . import training as T
from .errors import ConfigError, CtmaeError, DataError, VersionMismatch
from .patching import PatchGrid, patchify, sample_mask, unpatchify
from .volume_io import Volume, read_nifti, write_nifti

log = logging.getLogger("ctmae")

# --preset name -> (model preset, run preset per command)
PRESETS = {
    "paper-pt": ("paper", {"pretrain": "paper-pt"}),
    "paper-ft": ("paper", {"finetune": "paper-ft", "eval": "paper-ft"}),
    "paper-lp": ("paper", {"linprobe": "paper-lp", "eval": "paper-lp"}),
    "desk": ("desk", {"pretrain": "desk-pt", "finetune": "desk-ft",
                      "linprobe": "desk-lp", "eval": "desk-ft"}),
}
DATA_KEYS = {"manifest", "val_manifest", "out_dir", "init"}


# -- configuration -----------------------------------------------------------

def _fields(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _merge(base, section: dict, what: str, cls):
    """Apply a config section over a preset dataclass, warning on overrides."""
    known = _fields(cls)
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    changes = {}
    for key, value in section.items():
        current = getattr(base, key)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{what}.{key} must be true or false")
        if isinstance(current, (int, float)) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{what}.{key} must be a number, got {value!r}")
            value = type(current)(value)
        if value != current:
            log.warning("%s.%s = %r overrides preset value %r", what, key, value, current)
        changes[key] = value
    try:
        return dataclasses.replace(base, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, command: str, preset=None, seed=None):
    """Validate a YAML config into ``(ModelConfig, RunConfig, data dict)``."""
    try:
        doc = yaml.safe_load(Path(path).read_text()) if path else {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with sections model, run, data")
    unknown = set(doc) - {"model", "run", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    preset = preset or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    model_name, runs = PRESETS[preset]
    if command not in runs:
        raise ConfigError(f"preset {preset!r} does not apply to {command!r}")
    model_cfg = _merge(M.PRESETS[model_name], doc.get("model") or {}, "model", M.ModelConfig)
    run_cfg = _merge(T.RUN_PRESETS[runs[command]], doc.get("run") or {}, "run", T.RunConfig)
    if seed is not None:
        run_cfg = run_cfg.replace(seed=seed)
    data = dict(doc.get("data") or {})
    bad = set(data) - DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data keys: {sorted(bad)}")
    base = Path(path).parent if path else Path(".")
    for key in ("manifest", "val_manifest", "init", "out_dir"):
        if data.get(key) is not None:
            data[key] = base / data[key]
    if "out_dir" not in data:
        raise ConfigError("data.out_dir is required")
    return model_cfg, run_cfg, data


def write_effective_config(out_dir, model_cfg, run_cfg, data) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"model": model_cfg.to_dict(), "run": run_cfg.to_dict(),
           "data": {k: str(v) for k, v in data.items() if v is not None}}
    (out_dir / "effective_config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _items(data, key, side):
    if data.get(key) is None:
        raise ConfigError(f"data.{key} is required for this command")
    return T.load_items(P.read_manifest(data[key]), side)


def _labels(items, task):
    labels = [it.label for it in items]
    if any(y is None for y in labels):
        raise DataError("every manifest record needs a label for supervised training")
    return T.binary_merge(labels) if task == "binary" else labels


def _init_params(path, model_cfg, seed):
    """Load encoder weights from ``path`` (or initialize fresh) for ``model_cfg``."""
    if path is None:
        return M.init_params(model_cfg, seed)
    ckpt = _load(path)
    return adapt_head(ckpt.params, model_cfg, seed)


def _load(path) -> T.Checkpoint:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    return T.load_checkpoint(path)


def adapt_head(params: M.ModelParams, model_cfg: M.ModelConfig, seed: int) -> M.ModelParams:
    """Reuse encoder/decoder weights; re-initialize the head if the class count differs."""
    src = params.config
    if dataclasses.replace(src, n_classes=model_cfg.n_classes,
                           mask_after_encode=model_cfg.mask_after_encode) != model_cfg:
        raise VersionMismatch(f"checkpoint geometry {src.to_dict()} does not match {model_cfg.to_dict()}")
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    if src.n_classes != model_cfg.n_classes:
        fresh = M.init_params(model_cfg, seed)
        for name in ("head.weight", "head.bias"):
            arrays[name] = fresh[name].data.copy()
    return M.ModelParams.from_arrays(model_cfg, arrays)


# -- commands ----------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    P.check_side(args.side, args.patch)
    if args.n_per_class < 1:
        raise ConfigError("--n-per-class must be at least 1")
    records = synth.generate_corpus(args.n_per_class, args.side, args.seed, args.out)
    print(f"wrote {len(records)} scans to {args.out}/manifest.tsv")
    return 0


def _parse_spacing(text):
    if text == "auto":
        return "auto"
    if text.startswith("isotropic:"):
        try:
            mm = float(text.split(":", 1)[1])
        except ValueError:
            mm = -1.0
        if mm > 0:
            return mm
    raise ConfigError(f"--spacing must be 'auto' or 'isotropic:<mm>', got {text!r}")


def cmd_preprocess(args) -> int:
    spacing = _parse_spacing(args.spacing)
    records = P.read_manifest(args.manifest)
    reports = P.preprocess_corpus(records, args.out, spacing, args.side, args.patch)
    print(Path(args.out, "report.txt").read_text(), end="")
    log.info("%d scans preprocessed", len(reports))
    return 0


def cmd_pretrain(args) -> int:
    model_cfg, run_cfg, data = load_config(args.config, "pretrain", args.preset, args.seed)
    if run_cfg.modality != "PT":
        raise ConfigError("pretrain needs run.modality PT")
    items = _items(data, "manifest", model_cfg.side)
    init = _init_params(data.get("init"), model_cfg, run_cfg.seed) if data.get("init") else None
    write_effective_config(data["out_dir"], model_cfg, run_cfg, data)
    T.pretrain(items, run_cfg, model_cfg, init=init, out_dir=data["out_dir"],
               on_iter=lambda *rec: print(T.format_log_line(*rec), flush=True))
    print(f"checkpoint: {Path(data['out_dir']) / 'final.ctmae'}")
    return 0


def _supervised(args, command, mode) -> int:
    model_cfg, run_cfg, data = load_config(args.config, command, args.preset, args.seed)
    if run_cfg.modality != mode:
        raise ConfigError(f"{command} needs run.modality {mode}")
    if args.task == "binary":
        model_cfg = dataclasses.replace(model_cfg, n_classes=2)
    items = _items(data, "manifest", model_cfg.side)
    labels = _labels(items, args.task)
    val_items, val_labels = (), None
    if data.get("val_manifest") is not None:
        val_items = _items(data, "val_manifest", model_cfg.side)
        val_labels = _labels(val_items, args.task)
    init = _init_params(args.init or data.get("init"), model_cfg, run_cfg.seed)
    write_effective_config(data["out_dir"], model_cfg, run_cfg, data)
    res = T.finetune(items, run_cfg, model_cfg, init, mode, val_items=val_items,
                     labels=labels, val_labels=val_labels)
    out = Path(data["out_dir"])
    with open(out / "loss.csv", "w") as fh:
        for rec in res.log:
            line = T.format_log_line(*rec)
            fh.write(line + "\n")
            print(line)
    T.save_checkpoint(out / "final.ctmae", res.params, res.state, run_cfg, run_cfg.total_iters)
    logits = T.predict_logits(res.params, items)
    cm = E.confusion_matrix(labels, logits.argmax(axis=1), model_cfg.n_classes)
    lines = [f"train,{E.balanced_accuracy(cm)!r},{E.weighted_f1(cm)!r}"]
    for h in res.history:
        lines.append(f"val@{h['iter']},{h['balanced_accuracy']!r},{h['weighted_f1']!r},{h['val_loss']!r}")
    (out / "metrics.csv").write_text("split,balanced_accuracy,weighted_f1,val_loss\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_finetune(args) -> int:
    return _supervised(args, "finetune", "FT")


def cmd_linprobe(args) -> int:
    return _supervised(args, "linprobe", "LP")


def cmd_eval(args) -> int:
    command = {"FT": "finetune", "LP": "linprobe", None: "eval"}[args.mode]
    model_cfg, run_cfg, data = load_config(args.config, command, args.preset, args.seed)
    if args.task == "binary":
        model_cfg = dataclasses.replace(model_cfg, n_classes=2)
    mode = args.mode or ("LP" if run_cfg.modality == "LP" else "FT")
    items = _items(data, "manifest", model_cfg.side)
    labels = _labels(items, args.task)
    init = _init_params(args.checkpoint, model_cfg, run_cfg.seed)
    write_effective_config(data["out_dir"], model_cfg, run_cfg, data)
    results = E.run_protocol(items, run_cfg.replace(modality=mode), model_cfg, init, mode,
                             labels=labels, seed_base=args.split_seed)
    report = E.format_report(results)
    Path(data["out_dir"], "metrics.csv").write_text(report)
    print(report, end="")
    return 0


def cmd_reconstruct(args) -> int:
    if not 0 < args.mask_ratio < 1:
        raise ConfigError(f"--mask-ratio must lie in (0, 1), got {args.mask_ratio}")
    ckpt = _load(args.checkpoint)
    cfg = ckpt.params.config
    vol = read_nifti(args.scan)
    if vol.dims != (cfg.side,) * 3:
        raise DataError(f"scan dims {vol.dims} must equal the model cube {cfg.side}^3; preprocess first")
    grid = PatchGrid(cfg.side, cfg.patch)
    rows = patchify(vol.data, grid)
    sel = sample_mask(grid.n_patches, args.mask_ratio, args.seed)
    recon = M.reconstruct_batch(ckpt.params, rows[None].astype(np.float32), np.asarray(sel.visible)[None])
    out_rows = np.asarray(recon.data[0], dtype=np.float32)
    if not args.raw:
        # visible patches are shown as given, masked ones as predicted
        out_rows[list(sel.visible)] = rows[list(sel.visible)]
    write_nifti(Volume.from_array(unpatchify(out_rows, grid), vol.spacing), args.out)
    print(f"wrote {args.out} ({len(sel.masked)} of {grid.n_patches} patches reconstructed)")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctmae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic CT corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--side", type=int, default=40)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="resample, crop, normalize and resize a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", default="auto", help="auto | isotropic:<mm>")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--patch", type=int, default=8)
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("pretrain", cmd_pretrain, "masked-autoencoder pretraining"),
                                 ("finetune", cmd_finetune, "supervised fine-tuning"),
                                 ("linprobe", cmd_linprobe, "linear probing on a frozen encoder")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        if name != "pretrain":
            p.add_argument("--init", help="checkpoint to start from")
            p.add_argument("--task", choices=("multiclass", "binary"), default="multiclass")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="five repeated 70:30 splits from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--task", choices=("multiclass", "binary"), default="multiclass")
    p.add_argument("--mode", choices=("FT", "LP"))
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="mask and reconstruct one preprocessed scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="write the decoder output for every patch")
    p.set_defaults(func=cmd_reconstruct)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CtmaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
