"""Command-line entry point: gen, train, extract, classify, eval, embed, inspect.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 numeric divergence, 5 integrity.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import evalreport, featio, forest, training
from .datamodel import SplitSpec, stratified_split
from .errors import AecfeError, ConfigError
from .forest import ForestConfig
from .network import ModelConfig
from .synthgen import GenSpec, gen_dataset
from .training import TrainConfig

log = logging.getLogger("aecfe")


def _boolean(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


SCHEMA = {
    "gen": {"num_domains": int, "num_classes": int, "per_class_per_domain": int,
            "image_side": int, "feature_dim": int, "seed": int},
    "model": {"latent_dim": int, "encoder_widths": _int_tuple, "feat_decoder_widths": _int_tuple,
              "seed_side": int, "image_channels": _int_tuple, "upsample_strides": _int_tuple,
              "gn_groups": int, "gn_eps": float, "precision": str},
    "train": {"learning_rate": float, "epochs": int, "batch_size": int, "beta": float,
              "adam_beta1": float, "adam_beta2": float, "adam_eps": float, "seed": int,
              "deterministic": _boolean, "checkpoint_every": int},
    "forest": {"n_trees": int, "max_depth": int, "min_samples_split": int,
               "features_per_split": int, "bootstrap": _boolean, "seed": int},
    "eval": {"train_fraction": float, "split_seed": int, "seeds": _int_tuple},
}

EVAL_DEFAULTS = {"train_fraction": 0.8, "split_seed": 0, "seeds": (0, 1, 2, 3, 4)}


class RunConfig:
    """Sectioned key/value settings; only explicitly set keys are stored."""

    def __init__(self):
        self.values = {section: {} for section in SCHEMA}

    def set(self, section: str, key: str, raw):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key '{key}' in [{section}]")
        try:
            value = SCHEMA[section][key](raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
        self.values[section][key] = value

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse config {path}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(section, key, raw)
        for item in overrides:
            dotted, sep, raw = item.partition("=")
            section, dot, key = dotted.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            cfg.set(section.strip(), key.strip(), raw.strip())
        return cfg

    def gen_spec(self) -> GenSpec:
        return GenSpec(**self.values["gen"])

    def model_config(self, feature_dim: int, image_side: int) -> ModelConfig:
        kw = dict(self.values["model"])
        strides = kw.get("upsample_strides", ModelConfig.upsample_strides)
        kw.setdefault("seed_side", max(1, image_side // int(np.prod(strides))))
        return ModelConfig(input_dim=feature_dim, image_side=image_side, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def forest_config(self, threads: int = 1) -> ForestConfig:
        return ForestConfig(**self.values["forest"], n_jobs=max(1, threads))

    def eval_settings(self) -> dict:
        return {**EVAL_DEFAULTS, **self.values["eval"]}

    def resolved_text(self, **extra) -> str:
        """INI rendering of every setting, defaults included."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        defaults = {"gen": GenSpec(), "train": TrainConfig(), "forest": ForestConfig()}
        for section, schema in SCHEMA.items():
            parser.add_section(section)
            for key in schema:
                if key in self.values[section]:
                    value = self.values[section][key]
                elif section in defaults:
                    value = getattr(defaults[section], key)
                elif section == "eval":
                    value = EVAL_DEFAULTS[key]
                else:
                    continue
                parser.set(section, key, _render(value))
        for section, obj in extra.items():
            if not parser.has_section(section):
                parser.add_section(section)
            for f in fields(obj):
                parser.set(section, f.name, _render(getattr(obj, f.name)))
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser.items(section)]
            lines.append("")
        return "\n".join(lines)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set or ())
    return cfg


def _split_mask(ds, settings):
    _, test = stratified_split(ds, SplitSpec(settings["train_fraction"], settings["split_seed"]))
    return np.isin(ds.record_ids, test.record_ids)


def _latents(ckpt_path, ds):
    ckpt = featio.load_checkpoint(ckpt_path)
    if ckpt.config.input_dim != ds.meta.feature_dim:
        raise ConfigError(
            f"checkpoint expects feature_dim {ckpt.config.input_dim}, dataset has {ds.meta.feature_dim}")
    return ckpt, training.extract_latents(ckpt.params, ds, ckpt.config)


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.set("gen", "seed", args.seed)
    log.info("resolved config:\n%s", cfg.resolved_text())
    spec = cfg.gen_spec()
    ds = gen_dataset(spec)
    featio.write_dataset(ds, args.out)
    log.info("wrote %d records to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    for key, value in (("seed", args.seed), ("beta", args.beta), ("epochs", args.epochs)):
        if value is not None:
            cfg.set("train", key, value)
    if args.deterministic:
        cfg.set("train", "deterministic", True)
    ds = featio.read_dataset(args.dataset)
    model_cfg = cfg.model_config(ds.meta.feature_dim, ds.meta.image_side)
    train_cfg = cfg.train_config()
    settings = cfg.eval_settings()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved_text(model=model_cfg)
    log.info("resolved config:\n%s", resolved)
    (out / "config.ini").write_text(resolved)
    train_ds, _ = stratified_split(ds, SplitSpec(settings["train_fraction"], settings["split_seed"]))
    init = None
    if args.resume:
        ckpt = featio.load_checkpoint(args.resume, expected_config=model_cfg)
        init = (ckpt.params, ckpt.opt_state, ckpt.epoch)
        log.info("resuming from %s after epoch %d", args.resume, ckpt.epoch)
    result = training.train(train_ds, model_cfg, train_cfg, init=init, checkpoint_dir=out)
    result.history.write_csv(out / "loss_history.csv")
    featio.save_checkpoint(out / "model.aeck", result.params, result.opt_state, result.epoch, model_cfg)
    log.info("saved %s", out / "model.aeck")
    return 0


def cmd_extract(args) -> int:
    ds = featio.read_dataset(args.dataset)
    _, lm = _latents(args.checkpoint, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    featio.write_features(out / "latents.aecf", lm.latents)
    with open(out / "latents_index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "record_id", "domain", "label"))
        for row, (rid, d, lab) in enumerate(zip(lm.record_ids, lm.domains, lm.labels)):
            w.writerow((row, int(rid), int(d), int(lab)))
    log.info("wrote %d latent codes to %s", len(lm.latents), out)
    return 0


def cmd_classify(args) -> int:
    cfg = _load_config(args)
    ds = featio.read_dataset(args.dataset)
    _, lm = _latents(args.checkpoint, ds)
    test_mask = _split_mask(ds, cfg.eval_settings())
    rows = ~test_mask & (lm.domains == args.train_domain)
    if not rows.any():
        raise ConfigError(f"no training records for domain {args.train_domain}")
    fcfg = cfg.forest_config(args.threads)
    model = forest.fit(lm.latents[rows], lm.labels[rows], fcfg, ds.meta.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    featio.save_forest(out / "forest.aerf", model)
    pred = forest.predict(model, lm.latents[test_mask])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "domain", "label", "predicted"))
        for rid, d, lab, p in zip(lm.record_ids[test_mask], lm.domains[test_mask], lm.labels[test_mask], pred):
            w.writerow((int(rid), int(d), int(lab), int(p)))
    log.info("test accuracy over all domains: %.4f", forest.accuracy(lm.labels[test_mask], pred))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    settings = cfg.eval_settings()
    log.info("resolved config:\n%s", cfg.resolved_text())
    ds = featio.read_dataset(args.dataset)
    _, lm = _latents(args.checkpoint, ds)
    test_mask = _split_mask(ds, settings)
    matrix = evalreport.cross_domain_eval(lm.latents, lm.domains, lm.labels, test_mask,
                                          cfg.forest_config(args.threads), settings["seeds"],
                                          ds.meta.num_classes)
    alignment = evalreport.alignment_report(lm.latents, lm.domains)
    paths = evalreport.write_report(matrix, alignment, args.out)
    print(paths["summary"].read_text(), end="")
    return 0


def cmd_embed(args) -> int:
    ds = featio.read_dataset(args.dataset)
    _, lm = _latents(args.checkpoint, ds)
    export = evalreport.pca_embed(lm.latents, lm.record_ids, lm.domains, lm.labels)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    evalreport.write_embedding_csv(export, args.out)
    log.info("explained variance of the two components: %s", export.explained_variance)
    return 0


def cmd_inspect(args) -> int:
    print(json.dumps(featio.inspect(args.path), indent=2, default=str))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aecfe", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads (forest fits)")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI file with [gen]/[model]/[train]/[forest]/[eval] sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
        return p

    p = with_config(sub.add_parser("gen", help="generate a synthetic multi-domain dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = with_config(sub.add_parser("train", help="train the autoencoder on the train split"))
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write latent codes for every record")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("classify", help="fit one forest on a domain and predict the test split"))
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--train-domain", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = with_config(sub.add_parser("eval", help="cross-domain evaluation matrix and alignment report"))
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="2-D PCA embedding of the latent codes as CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("inspect", help="print the header of any artifact")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AecfeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 3
    except ValueError as exc:
        log.error("configuration error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
