"""Command-line entry point: data, two-stage training, inference and evaluation.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.
Set ``GENDET_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .flow import FlowSchedule, SamplingError, sample
from .model import CheckpointError, ModelConfig, UnifiedModel, load_checkpoint
from .objectives import LossWeights
from .synthcorpus import (CORPUS_FILES, INSTR_LEN, INSTRUCTIONS, TOKENIZER, CorpusConfig, CorpusFormatError,
                          PGMError, load_corpus, make_corpus, read_pgm, write_pgm)
from .tensorgrad import GradError, MaskError
from .train import FREEZE_POLICIES, TrainConfig, TrainingError, train_diga, train_gduf

log = logging.getLogger("gendet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "GENDET_LOG"


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

_MODEL_KEYS = ("image_size", "patch_det", "patch_gen", "d_model", "n_layers", "n_heads", "vocab_size",
               "max_text_len", "t_embed_dim", "ffn_mult", "smsa_on", "text_in_smsa", "detector_text_condition")
_TRAIN_KEYS = ("lr", "weight_decay", "beta1", "beta2", "adam_eps", "grad_clip", "steps_gduf", "steps_diga",
               "batch_size", "mix_det", "mix_gen", "diga_layer", "t_min", "seed", "eval_every", "freeze_policy",
               "balanced_diga", "log_wallclock")
_CORPUS_KEYS = ("n_det_train", "n_det_test", "n_gen_train", "n_gen_test")
_EXTRA = {"diga_target": "literal", "lambda_det": 1.0, "lambda_exp": 1.0, "lambda_fm": 1.0, "lambda_diga": 0.5,
          "sample_steps": 50, "n_fid": 256}


def default_config() -> dict:
    mc, tc, cc = ModelConfig(), TrainConfig(), CorpusConfig()
    out = {k: getattr(mc, k) for k in _MODEL_KEYS}
    out.update({k: getattr(tc, k) for k in _TRAIN_KEYS})
    out.update({k: getattr(cc, k) for k in _CORPUS_KEYS})
    out.update(_EXTRA)
    return out


def _coerce(key: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean for {key}, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _validate(cfg: dict) -> None:
    if cfg["diga_target"] not in ("literal", "velocity"):
        raise ConfigError(f"diga_target must be literal or velocity, got {cfg['diga_target']!r}")
    if cfg["freeze_policy"] not in FREEZE_POLICIES:
        raise ConfigError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {cfg['freeze_policy']!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` comments) over the defaults; unknown keys are errors."""
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in cfg:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = _coerce(key, value, cfg[key])
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    try:
        _validate(cfg)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def resolve_config(args) -> dict:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        cfg = parse_config_text(path.read_text(), str(path))
    else:
        cfg = default_config()
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.ablate_smsa:
        cfg["smsa_on"] = False
    if args.diga_target:
        cfg["diga_target"] = args.diga_target
    if args.freeze:
        cfg["freeze_policy"] = args.freeze
    if getattr(args, "steps", None) is not None:
        cfg["steps_gduf" if args.command == "train-gduf" else "steps_diga"] = args.steps
    _validate(cfg)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(flow_target=cfg["diga_target"], **{k: cfg[k] for k in _MODEL_KEYS})


def train_config(cfg: dict) -> TrainConfig:
    w = LossWeights(cfg["lambda_det"], cfg["lambda_exp"], cfg["lambda_fm"], cfg["lambda_diga"])
    return TrainConfig(weights=w, **{k: cfg[k] for k in _TRAIN_KEYS})


def corpus_config(cfg: dict) -> CorpusConfig:
    return CorpusConfig(image_size=cfg["image_size"], patch=cfg["patch_gen"], **{k: cfg[k] for k in _CORPUS_KEYS})


def _write_resolved(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(format_config(cfg))


# ---------------------------------------------------------------------------
# commands

def _corpus(data_dir, split: str):
    path = Path(data_dir) / CORPUS_FILES[split]
    if not path.is_file():
        raise FileNotFoundError(f"{path}: corpus file not found (run make-data first)")
    return load_corpus(path)


def _checkpoint(path) -> UnifiedModel:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: checkpoint not found")
    return load_checkpoint(p)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def cmd_make_data(args, cfg) -> int:
    _require(args, "out")
    out = Path(args.out)
    paths = make_corpus(corpus_config(cfg), cfg["seed"], out)
    _write_resolved(out, cfg)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def cmd_train_gduf(args, cfg) -> int:
    _require(args, "data", "out")
    det, gen = _corpus(args.data, "det-train"), _corpus(args.data, "gen-train")
    out = Path(args.out)
    _write_resolved(out, cfg)
    train_gduf(det, gen, train_config(cfg), model_config(cfg), out_dir=out)
    print(f"wrote {out / 'gduf.ckpt'} and {out / 'gduf_log.csv'}")
    return EXIT_OK


def cmd_train_diga(args, cfg) -> int:
    _require(args, "data", "ckpt", "out")
    model = _checkpoint(args.ckpt)
    if model.config.flow_target != cfg["diga_target"]:
        log.warning("checkpoint flow target %s replaced by %s", model.config.flow_target, cfg["diga_target"])
        model.config = dataclasses.replace(model.config, flow_target=cfg["diga_target"])
    gen = _corpus(args.data, "gen-train")
    det = _corpus(args.data, "det-train") if cfg["balanced_diga"] else None
    out = Path(args.out)
    _write_resolved(out, cfg)
    train_diga(model, gen, train_config(cfg), det_set=det, out_dir=out)
    print(f"wrote {out / 'diga.ckpt'} and {out / 'diga_log.csv'}")
    return EXIT_OK


def cmd_detect(args, cfg) -> int:
    _require(args, "ckpt")
    model = _checkpoint(args.ckpt)
    if not args.image:
        raise UsageError("detect requires at least one image path")
    if not 0 <= args.instruction < len(INSTRUCTIONS):
        raise UsageError(f"--instruction must lie in 0..{len(INSTRUCTIONS) - 1}")
    instr = TOKENIZER.pad(TOKENIZER.encode(INSTRUCTIONS[args.instruction]), INSTR_LEN)
    for path in args.image:
        img = read_pgm(path)
        if img.shape != (model.config.image_size,) * 2:
            raise PGMError(f"{path}: image is {img.shape}, model expects {model.config.image_size} square")
        prob = float(model.fake_probability(img[None], instr[None])[0])
        ids = model.explain(img[None], instr[None], max_len=model.config.max_text_len - INSTR_LEN)[0]
        label = "fake" if prob > 0.5 else "real"
        text = TOKENIZER.decode(ev.content_tokens(ids))
        print(f"{path}\t{label}\t{prob:.4f}\t{text}")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    _require(args, "ckpt", "out", "caption")
    model = _checkpoint(args.ckpt)
    ids = TOKENIZER.encode(args.caption)
    if TOKENIZER.unk_id in ids:
        raise UsageError(f"caption has words outside the vocabulary: {args.caption!r}")
    cap = np.broadcast_to(np.array(ids, dtype=np.int64), (args.n, len(ids)))
    images = sample(model, cap, FlowSchedule(cfg["sample_steps"], cfg["t_min"]), seed=cfg["seed"])
    out = Path(args.out)
    _write_resolved(out, cfg)
    for i, img in enumerate(images):
        write_pgm(out / f"sample_{i:03d}.pgm", img)
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def generate_for_captions(model: UnifiedModel, captions: np.ndarray, steps: int, t_min: float, seed: int,
                          batch: int = 64) -> np.ndarray:
    """Sample one image per caption row in fixed-size batches (seeded per batch)."""
    out = []
    for i, s in enumerate(range(0, len(captions), batch)):
        out.append(sample(model, captions[s:s + batch], FlowSchedule(steps, t_min), seed=seed * 1000 + i))
    return np.concatenate(out)


def cmd_eval(args, cfg) -> int:
    _require(args, "data", "ckpt", "out")
    model = _checkpoint(args.ckpt)
    det = _corpus(args.data, "det-test")
    report = ev.evaluate_detection(model, det, explain=not args.no_explain)
    if args.fid:
        feat_model = _checkpoint(args.feature_ckpt) if args.feature_ckpt else model
        gen = _corpus(args.data, "gen-test")
        n = min(cfg["n_fid"], len(gen))
        imgs = generate_for_captions(model, gen.captions[:n].astype(np.int64), cfg["sample_steps"], cfg["t_min"],
                                     cfg["seed"])
        report.fid_proxy = ev.fid_proxy(gen.images[:n], imgs, feat_model)
        report.diversity = ev.diversity(imgs, feat_model)
    out = Path(args.out)
    _write_resolved(out, cfg)
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.table())
    return EXIT_OK


def cmd_grad_check(args, cfg) -> int:
    from .gradsuite import TOLERANCE, run_suite
    failed = 0
    for r in run_suite():
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{r.name:24s} seed {r.seed}  max rel err {r.error:.3e}  {status}")
    print(f"{'all passed' if not failed else f'{failed} failed'} (tolerance {TOLERANCE:g})")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {
    "make-data": cmd_make_data, "train-gduf": cmd_train_gduf, "train-diga": cmd_train_diga,
    "detect": cmd_detect, "generate": cmd_generate, "eval": cmd_eval, "grad-check": cmd_grad_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--ablate-smsa", action="store_true", help="hide generation tokens from detection rows")
    common.add_argument("--diga-target", choices=("literal", "velocity"))
    common.add_argument("--freeze", choices=FREEZE_POLICIES)
    p = _Parser(prog="gendet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("make-data", parents=[common], help="write the synthetic corpora")
    for name in ("train-gduf", "train-diga"):
        s = sub.add_parser(name, parents=[common], help=f"run {name[6:]} training")
        s.add_argument("--data", help="corpus directory")
        s.add_argument("--steps", type=int)
        if name == "train-diga":
            s.add_argument("--ckpt", help="stage-one checkpoint")
    s = sub.add_parser("detect", parents=[common], help="classify and explain PGM images")
    s.add_argument("--ckpt")
    s.add_argument("--instruction", type=int, default=0, help="instruction template index")
    s.add_argument("image", nargs="*")
    s = sub.add_parser("generate", parents=[common], help="sample images for a caption")
    s.add_argument("--ckpt")
    s.add_argument("--caption")
    s.add_argument("--n", type=int, default=4)
    s = sub.add_parser("eval", parents=[common], help="write a metrics report")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--fid", action="store_true", help="also sample gen-test captions for fid and diversity")
    s.add_argument("--feature-ckpt", help="fixed feature model for fid (default: --ckpt)")
    s.add_argument("--no-explain", action="store_true", help="skip explanation decoding")
    sub.add_parser("grad-check", parents=[common], help="run the finite-difference gradient suite")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FileExistsError, CorpusFormatError, PGMError, CheckpointError,
            ev.MetricsError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SamplingError, GradError, MaskError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
