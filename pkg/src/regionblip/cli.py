"""``regionblip`` command line.

Every subcommand logs to stderr, writes artifacts to files and prints one
JSON summary line on stdout. Failures print a single JSON error line on
stderr and exit 1; config problems and bad flags exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ModelConfig, RegionBLIP
from .nn import ConfigError
from .pipeline import evaluate, pretrain_base, pretrain_lm
from .regioncap import FilterConfig, mine_regions
from .regions import MODALITIES
from .trainer import ModalitySource, TrainConfig, Trainer, build_dataclass, extend_incremental, parse_config_text

log = logging.getLogger("regionblip")

_DATA_KEYS = {"n_train": int, "n_test": int, "modalities": str, "split": str, "tau": float}


class Settings:
    """Config-file values split by consumer; CLI flags win over the file."""

    def __init__(self, values):
        model_names = {f.name for f in fields(ModelConfig)}
        train_names = {f.name for f in fields(TrainConfig)} | {"lambda"}
        self.model, self.train, self.misc = {}, {}, {}
        unknown = []
        for k, v in values.items():
            if k in model_names and k != "seed":
                self.model[k] = v
            elif k in train_names:
                self.train[k] = v
            elif k in _DATA_KEYS:
                try:
                    self.misc[k] = _DATA_KEYS[k](v)
                except ValueError:
                    raise ConfigError(f"bad value for {k}: {v!r}") from None
            else:
                unknown.append(k)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")

    def model_config(self, seed):
        proto = ModelConfig()
        kw = {}
        for k, v in self.model.items():
            default = getattr(proto, k)
            if isinstance(default, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, (int, float)):
                try:
                    kw[k] = type(default)(v)
                except ValueError:
                    raise ConfigError(f"bad value for {k}: {v!r}") from None
            elif isinstance(default, list):
                raise ConfigError(f"{k} cannot be set from a config file")
            else:
                kw[k] = v
        return ModelConfig(seed=seed, **kw)

    def train_config(self, args, **extra):
        values = dict(self.train)
        values.update({k: v for k, v in extra.items() if v is not None})
        if args.seed is not None:
            values["seed"] = args.seed
        if getattr(args, "lam", None) is not None:
            values["lam"] = args.lam
        if args.steps is not None:
            values.setdefault("total_steps", max(args.steps, 1))
            if int(values.get("warmup_steps", TrainConfig.warmup_steps)) >= int(values["total_steps"]):
                values["warmup_steps"] = max(0, int(values["total_steps"]) - 1)
        return build_dataclass(TrainConfig, values)


def _need(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _modalities(text):
    mods = [m.strip() for m in text.split(",") if m.strip()]
    for m in mods:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}; expected one of {sorted(MODALITIES)}")
    return mods


def cmd_gen_data(args, st):
    root = Path(_need(args.dataset_root or args.out, "--dataset-root"))
    mods = _modalities(args.modality or st.misc.get("modalities", ",".join(MODALITIES)))
    out = data.generate_all(root, st.misc.get("n_train", 200), st.misc.get("n_test", 40),
                            seed=args.seed or 0, modalities=mods)
    return {"dataset_root": str(root), "counts": {f"{m}_{s}": len(v) for (m, s), v in out.items()}}


def cmd_pretrain_lm(args, st):
    out = _need(args.out, "--out")
    seed = args.seed or 0
    model = RegionBLIP(st.model_config(seed))
    cfg = st.train_config(args)
    losses = pretrain_lm(model, cfg, steps=args.steps)
    save_checkpoint(model, out)
    return {"checkpoint": str(out), "steps": len(losses),
            "final_loss": losses[-1] if losses else None}


def cmd_pretrain_base(args, st):
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    root = _need(args.dataset_root, "--dataset-root")
    out = _need(args.out, "--out")
    cfg = st.train_config(args, modality_order="img_text")
    source = ModalitySource.from_split(model, root, "img_text", "train")
    reports = pretrain_base(model, source, cfg, steps=args.steps, log_path=Path(str(out) + ".log.jsonl"))
    save_checkpoint(model, out)
    return {"checkpoint": str(out), "steps": len(reports),
            "final": reports[-1].as_dict() if reports else None}


def cmd_extend(args, st):
    mod = _modalities(_need(args.modality, "--modality"))
    if len(mod) != 1:
        raise ConfigError("extend takes exactly one --modality")
    model = extend_incremental(_need(args.checkpoint, "--checkpoint"), mod[0], use_pafe=not args.no_pafe)
    out = _need(args.out, "--out")
    save_checkpoint(model, out)
    return {"checkpoint": str(out), "modality": mod[0], "pafe": not args.no_pafe,
            "base_checksum": model.base_checksum()}


def cmd_pretrain(args, st):
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    root = _need(args.dataset_root, "--dataset-root")
    out = _need(args.out, "--out")
    if args.modality:
        mods = _modalities(args.modality)
    else:
        mods = [m for m in model.adapters if any(p.requires_grad for _, p in model.adapter_parameters(m))]
    if not mods:
        raise ConfigError("no trainable modality in the checkpoint; run extend first")
    for m in mods:
        if m not in model.adapters:
            raise ConfigError(f"modality {m!r} is not registered in the checkpoint")
    cfg = st.train_config(args, modality_order=",".join(mods))
    sources = {m: ModalitySource.from_split(model, root, m, "train", augment=cfg.augment, seed=cfg.seed)
               for m in mods}
    steps = cfg.total_steps if args.steps is None else args.steps
    trainer = Trainer(model, cfg, log_path=Path(str(out) + ".log.jsonl"))
    reports = trainer.fit(sources, steps)
    save_checkpoint(model, out)
    return {"checkpoint": str(out), "modalities": mods, "steps": len(reports),
            "final": reports[-1].as_dict() if reports else None}


def cmd_eval(args, st):
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    root = _need(args.dataset_root, "--dataset-root")
    mods = _modalities(args.modality or "img_text")
    split = st.misc.get("split", "test")
    reports = []
    for m in mods:
        if m != "img_text" and m not in model.adapters:
            raise ConfigError(f"modality {m!r} is not registered in the checkpoint")
        source = ModalitySource.from_split(model, root, m, split)
        report, _ = evaluate(model, source, m if m in model.adapters else None, split, seed=args.seed or 0)
        reports.append(report)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return {"reports": reports}


def cmd_mine_regions(args, st):
    root = _need(args.dataset_root, "--dataset-root")
    mod = args.modality or "img_text"
    if MODALITIES[_modalities(mod)[0]].encoder != "image":
        raise ConfigError("mine-regions needs an image modality")
    out = _need(args.out, "--out")
    cfg = FilterConfig(tau=st.misc.get("tau", 0.9))
    _, stats = mine_regions(data.dataset_path(root, mod, st.misc.get("split", "train")), out, cfg)
    return {"out": str(out), **stats}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-lm": cmd_pretrain_lm,
    "pretrain-base": cmd_pretrain_base,
    "extend": cmd_extend,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "mine-regions": cmd_mine_regions,
}


def build_parser():
    p = argparse.ArgumentParser(prog="regionblip", description="desk-scale region-aware multimodal pre-training")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value file")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--modality")
    p.add_argument("--dataset-root")
    p.add_argument("--checkpoint")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--no-pafe", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.steps is not None and args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        values = parse_config_text(Path(args.config).read_text()) if args.config else {}
        summary = COMMANDS[args.command](args, Settings(values))
    except ConfigError as exc:
        print(json.dumps({"status": "error", "kind": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (CheckpointError, data.DatasetError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"status": "error", "kind": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
