"""Command-line front end: preprocess, train, evaluate, predict, ablate,
attention-map.

Configuration comes from a flat ``key=value`` file (``#`` comments)
overridable by flags; unknown keys are errors.  Exit codes are stable
for scripting: 0 success, 1 usage/config error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ecgfusion import analysis, data, sigproc, training
from ecgfusion.errors import ConfigError, DataError, NumericalError
from ecgfusion.model import (
    EcgTransformer,
    FUSION_MODES,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)

# key -> (type tag, default); the single source of truth for RunConfig
CONFIG_SCHEMA = {
    "seq_len": ("int", 250),
    "n_leads": ("int", 12),
    "d_model": ("int", 120),
    "n_heads": ("int", 12),
    "n_encoder_layers": ("int", 6),
    "n_decoder_layers": ("int", 6),
    "dropout": ("float", 0.2),
    "notes_dim": ("int", 768),
    "n_classes": ("int", 5),
    "fusion_mode": ("str", "cross_attention"),
    "per_lead_encoders": ("bool", False),
    "feedforward_dim": ("int", 480),
    "learning_rate": ("float", 0.0001),
    "batch_size": ("int", 4),
    "max_epochs": ("int", 40),
    "early_stop_patience": ("int", 5),
    "adam_beta1": ("float", 0.9),
    "adam_beta2": ("float", 0.999),
    "adam_eps": ("float", 1e-8),
    "seed": ("int", 0),
    "per_class_cap": ("int", 2500),
    "train_fraction": ("float", 0.8),
    "val_fraction": ("float", 0.1),
    "test_fraction": ("float", 0.1),
    "manifest": ("str", ""),
    "embeddings": ("str", ""),
    "out_dir": ("str", "runs"),
}

MODEL_KEYS = (
    "seq_len",
    "n_leads",
    "d_model",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "dropout",
    "notes_dim",
    "n_classes",
    "fusion_mode",
    "per_lead_encoders",
    "feedforward_dim",
)
TRAIN_KEYS = (
    "learning_rate",
    "batch_size",
    "max_epochs",
    "early_stop_patience",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
)


def _coerce(key: str, raw: str):
    kind, _ = CONFIG_SCHEMA[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = str(raw).strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: self.values[k] for k in MODEL_KEYS})

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(**{k: self.values[k] for k in TRAIN_KEYS})

    def split_spec(self) -> data.SplitSpec:
        return data.SplitSpec(
            train_fraction=self.values["train_fraction"],
            val_fraction=self.values["val_fraction"],
            test_fraction=self.values["test_fraction"],
            seed=self.values["seed"],
        )


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in CONFIG_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        values["out_dir"] = args.out
    return RunConfig(values)


# ---------------------------------------------------------------------------
# shared helpers


def _require_file(path, what: str) -> Path:
    p = Path(path) if path else None
    if not p or not str(path):
        raise ConfigError(f"missing required {what}")
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_dataset(run: RunConfig, need_embeddings: bool):
    manifest = _require_file(run.manifest, "manifest")
    embeddings = None
    if need_embeddings:
        emb_path = _require_file(run.embeddings, "embeddings file")
        embeddings = data.load_embeddings(emb_path)
    return data.load_clean_records(manifest, embeddings)


def _split_hash(split) -> str:
    digest = hashlib.sha256()
    for rec in split:
        digest.update(rec.record_id.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()[:16]


def _print_class_counts(records) -> None:
    labels = np.stack([r.labels for r in records])
    counts = labels.sum(axis=0).astype(int)
    for name, count in zip(data.CLASS_NAMES, counts):
        print(f"  {name}: {count}")


def _read_any_waveform(path) -> np.ndarray:
    """Clean 12x250 file, or raw 12x1000 run through the full cleanup."""
    size = Path(path).stat().st_size
    if size == sigproc.N_LEADS * sigproc.CLEAN_SAMPLES * 4:
        return data.read_waveform(path, sigproc.CLEAN_SAMPLES)
    if size == sigproc.N_LEADS * sigproc.RAW_SAMPLES * 4:
        raw = sigproc.RawEcg(
            leads=data.read_waveform(path, sigproc.RAW_SAMPLES), record_id=Path(path).stem
        )
        return sigproc.preprocess_record(raw).leads
    raise DataError(f"{path}: size {size} bytes matches neither raw nor clean waveform format")


def _record_for_inference(args, config: ModelConfig) -> data.LoadedRecord:
    wf_path = _require_file(args.waveform, "waveform file")
    wave = _read_any_waveform(wf_path)
    emb = None
    if config.fusion_mode != "waveform_only":
        if getattr(args, "note", None):
            emb = data.toy_embed(args.note)
        elif getattr(args, "embeddings", None):
            table = data.load_embeddings(_require_file(args.embeddings, "embeddings file"))
            rid = getattr(args, "record_id", None) or wf_path.stem
            if rid not in table:
                raise DataError(f"record {rid!r} not present in {args.embeddings}")
            emb = table[rid].vector
        else:
            raise ConfigError(
                f"fusion mode {config.fusion_mode!r} needs --note or --embeddings/--record-id"
            )
    return data.LoadedRecord(
        record_id=wf_path.stem,
        waveform=wave,
        labels=np.ones(config.n_classes),
        embedding=emb,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    run = build_run_config(args)
    manifest_path = _require_file(args.manifest or run.manifest, "manifest")
    out_dir = Path(args.out or run.out_dir)
    records = data.read_manifest(manifest_path)

    # validate every referenced waveform before writing anything
    raws = {}
    for rec in records:
        wf = data.resolve_waveform_path(manifest_path, rec.waveform_ref)
        if not wf.is_file():
            raise DataError(f"waveform file missing for {rec.record_id!r}: {wf}")
        raws[rec.record_id] = data.read_waveform(wf, sigproc.RAW_SAMPLES)

    kept = data.drop_blank_reports(records)
    if not kept:
        raise DataError("no records with a nonempty report")
    kept = data.balance_undersample(kept, args.cap, run.seed)

    wave_dir = out_dir / "clean"
    wave_dir.mkdir(parents=True, exist_ok=True)
    for rec in kept:
        raw = sigproc.RawEcg(leads=raws[rec.record_id], record_id=rec.record_id)
        clean = sigproc.preprocess_record(raw)
        data.write_waveform(wave_dir / f"{rec.record_id}.f32", clean.leads)
        rec.waveform_ref = f"clean/{rec.record_id}.f32"
    data.write_manifest(out_dir / "manifest.csv", kept)

    print(f"curated {len(kept)} of {len(records)} records -> {out_dir / 'manifest.csv'}")
    print("per-class counts:")
    _print_class_counts(kept)
    return 0


def _print_train_banner(run: RunConfig) -> None:
    print(
        "config: lr={learning_rate} batch={batch_size} d_model={d_model} "
        "heads={n_heads} enc_layers={n_encoder_layers} dec_layers={n_decoder_layers} "
        "dropout={dropout} fusion={fusion_mode} seed={seed}".format(**run.values)
    )


def cmd_train(args) -> int:
    run = build_run_config(args)
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    _print_train_banner(run)

    records = _load_dataset(run, need_embeddings=model_cfg.fusion_mode != "waveform_only")
    split_spec = run.split_spec()
    meta = [data.RecordMeta(record_id=r.record_id, labels=r.labels) for r in records]
    by_id = {r.record_id: r for r in records}
    train_meta, val_meta, _ = data.split(meta, split_spec)
    train_split = [by_id[m.record_id] for m in train_meta]
    val_split = [by_id[m.record_id] for m in val_meta]

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = EcgTransformer(model_cfg, seed=run.seed)
    best_params, history, best_epoch = training.fit_with_early_stop(
        model, train_split, val_split, train_cfg
    )
    model.params = best_params

    extra = {
        "seed": run.seed,
        "train_fraction": run.train_fraction,
        "val_fraction": run.val_fraction,
        "test_fraction": run.test_fraction,
        "manifest": str(run.manifest),
        "embeddings": str(run.embeddings),
    }
    save_checkpoint(out_dir / "checkpoint.bin", model_cfg, best_params, extra)
    training.write_history(out_dir / "history.csv", history)
    best = history[best_epoch - 1]
    with open(out_dir / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write(f"best_epoch={best_epoch}\n")
        fh.write(f"best_val_error={best.val_error:.6f}\n")
        fh.write(f"best_val_loss={best.val_loss:.6f}\n")
        fh.write(f"epochs_run={len(history)}\n")
    print(
        f"trained {len(history)} epochs; best epoch {best_epoch} "
        f"(val_error {best.val_error:.4f}); wrote {out_dir / 'checkpoint.bin'}"
    )
    return 0


def _resolve_eval_inputs(args, extra: dict):
    manifest = getattr(args, "manifest", None) or extra.get("manifest", "")
    embeddings = getattr(args, "embeddings", None) or extra.get("embeddings", "")
    seed = int(extra.get("seed", 0))
    spec = data.SplitSpec(
        train_fraction=float(extra.get("train_fraction", 0.8)),
        val_fraction=float(extra.get("val_fraction", 0.1)),
        test_fraction=float(extra.get("test_fraction", 0.1)),
        seed=seed,
    )
    return manifest, embeddings, spec


def cmd_evaluate(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    config, params, extra = load_checkpoint(ckpt_path)
    manifest, embeddings, spec = _resolve_eval_inputs(args, extra)
    manifest = _require_file(manifest, "manifest")
    table = None
    if config.fusion_mode != "waveform_only":
        table = data.load_embeddings(_require_file(embeddings, "embeddings file"))
    records = data.load_clean_records(manifest, table)

    meta = [data.RecordMeta(record_id=r.record_id, labels=r.labels) for r in records]
    by_id = {r.record_id: r for r in records}
    splits = dict(zip(("train", "val", "test"), data.split(meta, spec)))
    chosen = [by_id[m.record_id] for m in splits[args.split]]

    model = EcgTransformer(config, params=params)
    loss, acc, probs = training.evaluate(model, chosen)
    print(f"{args.split}: {len(chosen)} records, loss {loss:.6f}, accuracy {acc:.4f}")
    print("per-class counts:")
    _print_class_counts(chosen)

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / f"probabilities_{args.split}.csv"
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("record_id,p_NORM,p_MI,p_STTC,p_CD,p_HYP,labels\n")
            for rec, row in zip(chosen, probs):
                codes = ";".join(data.label_codes(rec.labels.astype(int)))
                fh.write(rec.record_id + "," + ",".join(f"{p:.6f}" for p in row) + f",{codes}\n")
        print(f"wrote {out_path}")
    return 0


def cmd_predict(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    config, params, _ = load_checkpoint(ckpt_path)
    record = _record_for_inference(args, config)
    model = EcgTransformer(config, params=params)
    probs, _ = model.forward(record, train=False)
    flagged = []
    for name, p in zip(data.CLASS_NAMES, probs.data):
        marker = ""
        if p > 0.5:
            marker = "  <-- flagged"
            flagged.append(name)
        print(f"  {name}: {p:.4f}{marker}")
    print(f"flagged classes: {', '.join(flagged) if flagged else '(none)'}")
    return 0


def cmd_ablate(args) -> int:
    run = build_run_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if len(modes) < 2:
        raise ConfigError(f"ablation needs at least 2 fusion modes, got {modes}")
    for mode in modes:
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; options: {FUSION_MODES}")

    records = _load_dataset(run, need_embeddings=True)
    spec = run.split_spec()
    meta = [data.RecordMeta(record_id=r.record_id, labels=r.labels) for r in records]
    by_id = {r.record_id: r for r in records}
    split_meta = data.split(meta, spec)
    splits = [[by_id[m.record_id] for m in part] for part in split_meta]
    print(
        "split sizes train/val/test: %d/%d/%d, hashes %s"
        % (
            len(splits[0]),
            len(splits[1]),
            len(splits[2]),
            "/".join(_split_hash(s) for s in splits),
        )
    )

    train_cfg = run.train_config()
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        values = dict(run.values)
        values["fusion_mode"] = mode
        cfg = RunConfig(values).model_config()
        try:
            model = EcgTransformer(cfg, seed=run.seed)
            best_params, history, best_epoch = training.fit_with_early_stop(
                model, splits[0], splits[1], train_cfg
            )
            model.params = best_params
            tr = training.evaluate(model, splits[0])
            va = training.evaluate(model, splits[1])
            te = training.evaluate(model, splits[2])
            rows.append((mode, tr[1], va[1], te[1], va[0]))
            print(
                f"{mode}: train {tr[1]:.4f}, val {va[1]:.4f}, test {te[1]:.4f}, "
                f"val_loss {va[0]:.4f} (best epoch {best_epoch})"
            )
        except (DataError, NumericalError) as exc:
            print(f"{mode}: FAILED ({exc})", file=sys.stderr)
            rows.append((mode, float("nan"), float("nan"), float("nan"), float("nan")))

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("mode,train_accuracy,val_accuracy,test_accuracy,val_loss\n")
        for mode, tr_acc, va_acc, te_acc, va_loss in rows:
            fh.write(f"{mode},{tr_acc:.6f},{va_acc:.6f},{te_acc:.6f},{va_loss:.6f}\n")
    print(f"wrote {table_path}")
    return 0


def cmd_attention_map(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    config, params, _ = load_checkpoint(ckpt_path)
    record = _record_for_inference(args, config)
    model = EcgTransformer(config, params=params)
    try:
        heatmap = analysis.attention_heatmap(model, record, args.layer)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out_dir = Path(args.out or "heatmaps")
    base = out_dir / f"attention_{record.record_id}_layer{args.layer}"
    analysis.export_heatmap(heatmap, base)
    print(f"wrote {base.with_suffix('.csv')} and {base.with_suffix('.pgm')}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(self._exit_code(message))

    @staticmethod
    def _exit_code(message) -> int:
        print(f"error: {message}", file=sys.stderr)
        return 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="run seed (default: 0)")
    parser.add_argument("--out", help="output directory")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", help="curated manifest CSV")
    parser.add_argument("--embeddings", help="notes embeddings file")
    parser.add_argument(
        "--learning-rate", dest="learning_rate", type=float, help="learning rate (default: 0.0001)"
    )
    parser.add_argument(
        "--batch-size", dest="batch_size", type=int, help="batch size (default: 4)"
    )
    parser.add_argument("--d-model", dest="d_model", type=int, help="model dimension (default: 120)")
    parser.add_argument("--heads", dest="n_heads", type=int, help="attention heads (default: 12)")
    parser.add_argument(
        "--encoder-layers", dest="n_encoder_layers", type=int, help="encoder layers (default: 6)"
    )
    parser.add_argument(
        "--decoder-layers", dest="n_decoder_layers", type=int, help="decoder layers (default: 6)"
    )
    parser.add_argument("--dropout", type=float, help="dropout probability (default: 0.2)")
    parser.add_argument(
        "--feedforward-dim", dest="feedforward_dim", type=int, help="feed-forward width (default: 480)"
    )
    parser.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch cap (default: 40)")
    parser.add_argument(
        "--patience", dest="early_stop_patience", type=int, help="early-stop patience (default: 5)"
    )
    parser.add_argument(
        "--fusion-mode",
        dest="fusion_mode",
        choices=FUSION_MODES,
        help="modality fusion strategy (default: cross_attention)",
    )
    parser.add_argument(
        "--per-lead",
        dest="per_lead_encoders",
        action="store_const",
        const=True,
        help="run one independent encoder per lead (default: off)",
    )


def _add_note_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--note", help="clinical note text (embedded with the toy encoder)")
    parser.add_argument("--embeddings", help="embeddings file to look the record up in")
    parser.add_argument("--record-id", dest="record_id", help="record id inside --embeddings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="curate a raw manifest and write clean waveforms")
    _add_common(p)
    p.add_argument("--manifest", help="raw manifest CSV (12x1000 waveforms)")
    p.add_argument("--cap", type=int, default=2500, help="per-class cap (default: 2500)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="override the manifest stored in the checkpoint")
    p.add_argument("--embeddings", help="override the embeddings stored in the checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one waveform")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--waveform", required=True, help="raw 12x1000 or clean 12x250 .f32 file")
    _add_note_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare several fusion modes")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument(
        "--modes",
        default="cross_attention,early_concat,early_sum,waveform_only",
        help="comma-separated fusion modes to compare",
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attention-map", help="export a pooled-attention heatmap")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--waveform", required=True)
    p.add_argument("--layer", type=int, default=0, help="encoder layer index (default: 0)")
    _add_note_flags(p)
    p.set_defaults(func=cmd_attention_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
