"""Declarative run configuration: plain-text sections, schema, manifests.

A config is an INI-style file; every run resolves it against the schema
(defaults filled, every key validated), writes the fully-resolved manifest
next to its outputs, and stamps the manifest hash into checkpoints and CSV
headers. Rerunning from a manifest reproduces the artifacts bit for bit.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig
from .bench import BenchConfig


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _auto_int(text: str) -> int | None:
    return None if text.strip().lower() == "auto" else int(text)


# section -> key -> (parser, default-as-written)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, "0"),
        "out_dir": (str, ""),  # empty: resolved from TAPERNORM_OUT_DIR or ./runs
        "name": (str, "run"),
    },
    "data": {
        "corpus": (str, "builtin"),
        "val_frac": (float, "0.1"),
    },
    "model": {
        "d": (int, "64"),
        "n_layers": (int, "2"),
        "n_heads": (int, "4"),
        "t_max": (int, "128"),
        "vocab": (_auto_int, "auto"),  # auto: derived from the corpus
        "mlp_expansion": (int, "4"),
        "norm_variant": (str, "rms"),
        "taper_scope": (str, "none"),
        "eps": (float, "1e-6"),
        "rope_base": (float, "10000.0"),
    },
    "train": {
        "steps": (int, "5000"),
        "batch_size": (int, "16"),
        "seq_len": (int, "128"),
        "peak_lr": (float, "3e-4"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.95"),
        "warmup_frac": (float, "0.05"),
        "grad_clip": (float, "1.0"),
        "eval_interval": (int, "500"),
    },
    "taper": {
        "k_start": (_auto_int, "auto"),
        "k_end": (_auto_int, "auto"),
    },
    "aux": {
        "enabled": (_bool, "false"),
        "lambda": (float, "0.1"),
        "mu": (float, "0.01"),
    },
    "bench": {
        "batch_sizes": (_int_list, "1,4"),
        "seq_lens": (_int_list, "128,256,512"),
        "warmup_iters": (int, "10"),
        "timed_iters": (int, "50"),
    },
}

ENV_OUT_DIR = "TAPERNORM_OUT_DIR"


@dataclass
class ResolvedConfig:
    """Config with every key parsed and defaults applied."""

    values: dict[str, dict[str, object]]
    text: dict[str, dict[str, str]]  # canonical string forms

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def out_dir(self) -> str:
        configured = self.values["run"]["out_dir"]
        if configured:
            return str(configured)
        root = os.environ.get(ENV_OUT_DIR, "runs")
        return os.path.join(root, str(self.values["run"]["name"]))

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        m = self.values["model"]
        vocab = m["vocab"] if m["vocab"] is not None else vocab_size
        if vocab is None:
            raise ConfigError("model.vocab is auto but no corpus was provided to derive it")
        return ModelConfig(
            d=m["d"], n_layers=m["n_layers"], n_heads=m["n_heads"], t_max=m["t_max"],
            vocab=vocab, mlp_expansion=m["mlp_expansion"], norm_variant=m["norm_variant"],
            taper_scope=m["taper_scope"], eps=m["eps"], rope_base=m["rope_base"],
        )

    def train_config(self) -> TrainConfig:
        t, taper, aux = self.values["train"], self.values["taper"], self.values["aux"]
        return TrainConfig(
            steps=t["steps"], batch_size=t["batch_size"], seq_len=t["seq_len"],
            peak_lr=t["peak_lr"], betas=(t["beta1"], t["beta2"]),
            warmup_frac=t["warmup_frac"], grad_clip=t["grad_clip"],
            taper_start=taper["k_start"], taper_end=taper["k_end"],
            aux_enabled=aux["enabled"], aux_lambda=aux["lambda"], ema_mu=aux["mu"],
            seed=self.seed, eval_interval=t["eval_interval"],
            val_frac=self.values["data"]["val_frac"],
        )

    def bench_config(self, seed: int | None = None) -> BenchConfig:
        b = self.values["bench"]
        return BenchConfig(
            batch_sizes=b["batch_sizes"], seq_lens=b["seq_lens"],
            warmup_iters=b["warmup_iters"], timed_iters=b["timed_iters"],
            seed=self.seed if seed is None else seed,
        )

    def canonical_text(self, include_out_dir: bool = True) -> str:
        """Deterministic rendering: sorted sections and keys."""
        buf = io.StringIO()
        for section in sorted(self.text):
            buf.write(f"[{section}]\n")
            for key in sorted(self.text[section]):
                if not include_out_dir and (section, key) == ("run", "out_dir"):
                    continue
                buf.write(f"{key} = {self.text[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def manifest_hash(self) -> str:
        """Hash of the resolved config, independent of where outputs land."""
        canon = self.canonical_text(include_out_dir=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def read_config_file(path: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path!r}: {e}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def apply_overrides(raw: dict[str, dict[str, str]], overrides: list[str]) -> None:
    """Apply ``section.key=value`` strings in place."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value.strip()


def resolve(raw: dict[str, dict[str, str]] | None = None) -> ResolvedConfig:
    """Validate against the schema and fill defaults.

    Unknown sections or keys are rejected with their names listed verbatim.
    An ``artifacts`` section (written into manifests) is tolerated and
    ignored so a manifest is itself a valid config.
    """
    raw = dict(raw or {})
    raw.pop("artifacts", None)

    unknown_sections = sorted(set(raw) - set(SCHEMA))
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown_sections)}")

    values: dict[str, dict[str, object]] = {}
    text: dict[str, dict[str, str]] = {}
    problems: list[str] = []
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        unknown = sorted(set(given) - set(keys))
        problems.extend(f"{section}.{k}" for k in unknown)
        values[section] = {}
        text[section] = {}
        for key, (parse, default) in keys.items():
            literal = given.get(key, default)
            try:
                values[section][key] = parse(literal)
            except (ValueError, TypeError):
                raise ConfigError(f"bad value for {section}.{key}: {literal!r}") from None
            text[section][key] = str(literal).strip()
    if problems:
        raise ConfigError(f"unknown config key(s): {', '.join(problems)}")

    cfg = ResolvedConfig(values=values, text=text)
    variants = ("rms", "ln")
    scopes = ("none", "internal", "all")
    if values["model"]["norm_variant"] not in variants:
        raise ConfigError(f"model.norm_variant must be one of {variants}")
    if values["model"]["taper_scope"] not in scopes:
        raise ConfigError(f"model.taper_scope must be one of {scopes}")
    return cfg


def load_config(path: str, overrides: list[str] | None = None,
                seed: int | None = None, out_dir: str | None = None) -> ResolvedConfig:
    raw = read_config_file(path)
    apply_overrides(raw, overrides or [])
    if seed is not None:
        raw.setdefault("run", {})["seed"] = str(seed)
    if out_dir is not None:
        raw.setdefault("run", {})["out_dir"] = out_dir
    return resolve(raw)


def write_manifest(cfg: ResolvedConfig, out_dir: str, artifacts: dict[str, str]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.ini")
    body = cfg.canonical_text(include_out_dir=True)
    lines = [body, "[artifacts]\n"]
    lines.append(f"manifest_hash = {cfg.manifest_hash()}\n")
    for key in sorted(artifacts):
        lines.append(f"{key} = {artifacts[key]}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)
    return path
