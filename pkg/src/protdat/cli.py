"""Operator entry point.

Subcommands: prepare-data, train, generate, eval, sweep,
export-attention.  Values resolve as flags > config file (YAML) >
defaults; the output directory may also come from the PROTDAT_OUT_DIR
environment variable.  Every run writes a reproducibility manifest
(config snapshot, seed, version) next to its outputs, and all randomness
flows from the single root seed recorded there.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .data import DatasetError, SplitSpec, load_records, read_dataset, split_records, write_jsonl
from .evaluation import (
    EvaluationError,
    ResidueDistribution,
    export_attention_maps,
    global_sequence_identity,
    kl_divergence,
    parameter_sweep,
    parse_tmalign_output,
    plddt_from_pdb,
    read_fasta,
    write_sweep_csv,
)
from .generation import (
    MODE_TEXT_FRAGMENT,
    MODE_TEXT_ONLY,
    GenerationError,
    GenerationParams,
    PromptSpec,
    fasta_header,
    generate,
    write_fasta,
    write_trace,
)
from .model import ModelConfig, ModelError, load_checkpoint
from .numerics import NumericsError
from .tokenizer import TokenizerError
from .training import TrainingConfig, TrainingError, fit

KNOWN_ERRORS = (
    DatasetError,
    EvaluationError,
    GenerationError,
    ModelError,
    NumericsError,
    TokenizerError,
    TrainingError,
    FileNotFoundError,
    ValueError,
)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/latest"
    dataset: str | None = None
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.training)

    def generation_params(self, **overrides) -> GenerationParams:
        merged = dict(self.generation)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return GenerationParams(**merged)


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise DatasetError(f"config file {path} must be a key-value tree")
        for key in ("seed", "out_dir", "dataset"):
            if key in raw:
                setattr(cfg, key, raw[key])
        for key in ("model", "training", "generation"):
            if key in raw:
                section = raw[key]
                if not isinstance(section, dict):
                    raise DatasetError(f"config section {key!r} must be a mapping")
                getattr(cfg, key).update(section)
    return cfg


def resolve_out_dir(flag_value: str | None, cfg: RunConfig) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("PROTDAT_OUT_DIR")
    if env:
        return Path(env)
    return Path(cfg.out_dir)


def write_manifest(out_dir: Path, command: str, cfg_snapshot: dict, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": cfg_snapshot,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_file_manifest(out_file, command: str, cfg_snapshot: dict, seed: int) -> None:
    """Sidecar manifest for commands whose output is a single file."""
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": cfg_snapshot,
    }
    Path(str(out_file) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _collect_model_overrides(args) -> dict:
    keys = ("d_model", "n_layers", "n_heads", "c_size", "d_text", "ffn_dim", "dtype")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _collect_training_overrides(args) -> dict:
    keys = ("batch_size", "lr", "weight_decay", "clip_norm")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# -- subcommand implementations ----------------------------------------------


def cmd_prepare_data(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = resolve_out_dir(args.out, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = read_dataset(args.data, args.format)
    if report.total_rows == 0:
        raise DatasetError(f"{args.data}: no rows")
    (out_dir / "errors.txt").write_text(report.error_text + ("\n" if report.errors else ""))
    if len(report.errors) > 0.10 * report.total_rows:
        raise DatasetError(
            f"{args.data}: {len(report.errors)}/{report.total_rows} invalid rows; see errors.txt"
        )
    seed = args.seed if args.seed is not None else cfg.seed
    spec = SplitSpec(train=args.train, valid=args.valid, test=args.test, seed=seed)
    train, valid, test = split_records(report.records, spec)
    write_jsonl(out_dir / "train.jsonl", train)
    write_jsonl(out_dir / "valid.jsonl", valid)
    write_jsonl(out_dir / "test.jsonl", test)
    write_manifest(
        out_dir,
        "prepare-data",
        {
            "input": str(args.data),
            "format": args.format,
            "split": [args.train, args.valid, args.test],
            "rows": report.total_rows,
            "invalid": len(report.errors),
            "sizes": [len(train), len(valid), len(test)],
        },
        seed,
    )
    print(
        f"prepared {len(report.records)} records -> train/valid/test = "
        f"{len(train)}/{len(valid)}/{len(test)} ({len(report.errors)} invalid rows)"
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg.model.update(_collect_model_overrides(args))
    cfg.training.update(_collect_training_overrides(args))
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = resolve_out_dir(args.out, cfg)
    data_path = args.data or cfg.dataset
    if not data_path:
        raise DatasetError("train: no dataset given (--data or config)")
    train_records = load_records(data_path)
    valid_records = load_records(args.valid) if args.valid else []
    model_config = cfg.model_config()
    train_config = cfg.training_config()
    params, log = fit(
        train_records,
        valid_records,
        model_config,
        train_config,
        epochs=args.epochs,
        seed=seed,
        out_dir=out_dir,
        embedding_path=args.embeddings,
        max_steps=args.max_steps,
    )
    write_manifest(
        out_dir,
        "train",
        {
            "dataset": str(data_path),
            "valid": str(args.valid) if args.valid else None,
            "epochs": args.epochs,
            "max_steps": args.max_steps,
            "model": model_config.to_dict(),
            "training": train_config.to_dict(),
        },
        seed,
    )
    train_losses = log.losses("train")
    last = f"{train_losses[-1]:.4f}" if train_losses else "n/a"
    print(f"trained {len(train_losses)} steps (final loss {last}); checkpoint: {out_dir / 'model.ckpt'}")
    return 0


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    params = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else cfg.seed
    gp = cfg.generation_params(
        temperature=args.temperature,
        top_p=args.top_p,
        repetition_penalty=args.repetition_penalty,
        max_len=args.max_len,
        seed=seed,
    )
    prompt = PromptSpec(mode=args.mode, text=args.text, fragment=args.fragment or "")
    provider = params.text_encoder(args.embeddings)
    entries = []
    all_steps = []
    for i in range(args.num):
        gp_i = GenerationParams(
            temperature=gp.temperature,
            top_p=gp.top_p,
            repetition_penalty=gp.repetition_penalty,
            max_len=gp.max_len,
            seed=gp.seed + i,
        )
        result = generate(prompt, params, gp_i, text_provider=provider, record_id=args.record_id)
        entries.append((fasta_header(f"gen-{i:04d}", prompt, gp_i), result.sequence))
        all_steps.extend(result.steps)
    if args.out:
        with open(args.out, "w") as fh:
            write_fasta(entries, fh)
        write_file_manifest(
            args.out, "generate",
            {"ckpt": str(args.ckpt), "mode": prompt.mode, "num": args.num,
             "temperature": gp.temperature, "top_p": gp.top_p,
             "repetition_penalty": gp.repetition_penalty, "max_len": gp.max_len},
            seed,
        )
    else:
        write_fasta(entries, sys.stdout)
    if args.trace:
        with open(args.trace, "w") as fh:
            write_trace(all_steps, fh)
    return 0


def cmd_eval(args) -> int:
    if args.metric == "identity":
        ref = read_fasta(args.ref)
        gen = read_fasta(args.gen)
        if len(ref) != len(gen):
            raise EvaluationError(f"entry count mismatch: {len(ref)} ref vs {len(gen)} gen")
        lines = ["ref_id,gen_id,identity,score"]
        for (ref_h, ref_seq), (gen_h, gen_seq) in zip(ref, gen):
            r = global_sequence_identity(ref_seq, gen_seq)
            lines.append(f"{ref_h.split()[0]},{gen_h.split()[0]},{r.identity:.6f},{r.score}")
        output = "\n".join(lines) + "\n"
    elif args.metric == "kl":
        ref = ResidueDistribution.from_sequences(seq for _, seq in read_fasta(args.ref))
        gen = ResidueDistribution.from_sequences(seq for _, seq in read_fasta(args.gen))
        output = f"kl\n{kl_divergence(gen, ref):.8f}\n"
    elif args.metric == "plddt":
        lines = ["file,mean_plddt,n_residues"]
        for pdb in args.pdb:
            mean, values = plddt_from_pdb(pdb)
            lines.append(f"{pdb},{mean:.4f},{len(values)}")
        output = "\n".join(lines) + "\n"
    elif args.metric == "tmalign":
        tm, rmsd = parse_tmalign_output(Path(args.input).read_text())
        output = f"tm_score,rmsd\n{tm},{rmsd}\n"
    else:  # pragma: no cover - argparse restricts choices
        raise EvaluationError(f"unknown metric {args.metric!r}")
    if args.out:
        Path(args.out).write_text(output)
    else:
        sys.stdout.write(output)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    params = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else cfg.seed
    records = load_records(args.data)
    if args.limit:
        records = records[: args.limit]
    gp = cfg.generation_params(max_len=args.max_len, seed=seed)
    provider = params.text_encoder(args.embeddings)
    cells = parameter_sweep(
        params,
        records,
        top_p_values=_floats(args.top_p),
        temperature_values=_floats(args.temperature),
        gp=gp,
        text_provider=provider,
    )
    if args.out:
        with open(args.out, "w") as fh:
            write_sweep_csv(cells, fh)
        write_file_manifest(
            args.out, "sweep",
            {"ckpt": str(args.ckpt), "data": str(args.data), "limit": args.limit,
             "top_p": args.top_p, "temperature": args.temperature,
             "max_len": gp.max_len, "repetition_penalty": gp.repetition_penalty},
            seed,
        )
    else:
        write_sweep_csv(cells, sys.stdout)
    return 0


def cmd_export_attention(args) -> int:
    cfg = load_run_config(args.config)
    params = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = resolve_out_dir(args.out, cfg)
    prompt = PromptSpec(mode=args.mode, text=args.text, fragment=args.fragment or "")
    gp = cfg.generation_params(max_len=args.max_len, seed=seed)
    provider = params.text_encoder(args.embeddings)
    result, trace = generate(
        prompt, params, gp, text_provider=provider, record_id=args.record_id, trace_attention=True
    )
    entries = export_attention_maps(trace, condense_cross=args.condense, out_dir=out_dir)
    write_manifest(
        out_dir,
        "export-attention",
        {"ckpt": str(args.ckpt), "mode": args.mode, "condense": args.condense,
         "generated_length": len(result.sequence)},
        seed,
    )
    print(f"wrote {len(entries)} matrices to {out_dir}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protdat",
        description="Train, sample and evaluate a text-conditioned protein sequence generator.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file (flags override file values)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("prepare-data", help="validate, split and write canonical jsonl")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("jsonl", "table"), default="jsonl")
    p.add_argument("--out", default=None)
    p.add_argument("--train", type=float, default=0.8)
    p.add_argument("--valid", type=float, default=0.1)
    p.add_argument("--test", type=float, default=0.1)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="fit a model on a jsonl dataset")
    add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--valid", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    p.add_argument("--embeddings", default=None, help="precomputed text-embedding file")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--c-size", type=int, dest="c_size")
    p.add_argument("--d-text", type=int, dest="d_text")
    p.add_argument("--ffn-dim", type=int, dest="ffn_dim")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample sequences from a checkpoint")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--fragment", default=None)
    p.add_argument("--mode", choices=(MODE_TEXT_ONLY, MODE_TEXT_FRAGMENT), default=MODE_TEXT_ONLY)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--temperature", type=float)
    p.add_argument("--repetition-penalty", type=float, dest="repetition_penalty")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--record-id", default=None, dest="record_id")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default=None, help="FASTA path (default: stdout)")
    p.add_argument("--trace", default=None, help="per-step decoding trace (jsonl)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="sequence metrics over FASTA/PDB/alignment-tool files")
    add_common(p)
    p.add_argument("metric", choices=("identity", "kl", "plddt", "tmalign"))
    p.add_argument("--ref")
    p.add_argument("--gen")
    p.add_argument("--pdb", nargs="*", default=[])
    p.add_argument("--in", dest="input")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="top-p x temperature generation sweep")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--top-p", default="0.55,0.70,0.85,1.0", dest="top_p")
    p.add_argument("--temperature", default="0.4,0.6,0.8,1.0,1.2,1.4")
    p.add_argument("--max-len", type=int, dest="max_len", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attention", help="write attention-weight matrices for a prompt")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--fragment", default=None)
    p.add_argument("--mode", choices=(MODE_TEXT_ONLY, MODE_TEXT_FRAGMENT), default=MODE_TEXT_ONLY)
    p.add_argument("--max-len", type=int, dest="max_len", default=64)
    p.add_argument("--condense", action="store_true")
    p.add_argument("--record-id", default=None, dest="record_id")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_attention)
    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        sys.stderr.write(json.dumps({"error": f"{type(exc).__name__}: {exc}"}) + "\n")
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
