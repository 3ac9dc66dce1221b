"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from pathlib import Path

from .datagen import SynthSpec
from .training import TrainRegime

INFER_MODES = ("collaborative", "basic_ensemble", "sens_only", "cons_only", "all")


class ConfigError(ValueError):
    pass


def _regime_keys(prefix: str, lr: float, steps: int, lam: float | None) -> dict:
    keys = {
        f"{prefix}.learning_rate": lr,
        f"{prefix}.steps": steps,
        f"{prefix}.batch_size": 8,
        f"{prefix}.topk_ratio": 0.0625,
        f"{prefix}.beta1": 0.9,
        f"{prefix}.beta2": 0.999,
        f"{prefix}.weight_decay": 0.0,
    }
    if lam is not None:
        keys[f"{prefix}.lambda_gmp"] = lam
    return keys


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.dir": "run/data",
    "data.features_dir": "",
    "data.T": 256,
    "data.D": 64,
    "data.n_videos": 200,
    "data.transient_min": 3,
    "data.transient_max": 8,
    "data.sustained_min": 48,
    "data.sustained_max": 96,
    "data.anomaly_shift": 1.5,
    "data.noise_sigma": 1.0,
    "data.anomalous_fraction": 0.5,
    "data.test_T": 640,
    "data.test_n_videos": 100,
    **_regime_keys("sens", 1e-3, 200, None),
    **_regime_keys("cons", 5e-5, 400, 0.7),
    "cons.K": 5,
    **_regime_keys("unified", 1e-4, 200, 0.7),
    "train.output_dir": "run/models",
    "infer.window_len": 256,
    "infer.stride": 128,
    "infer.mode": "all",
    "infer.output_dir": "run/scores",
    "eval.output_dir": "run/eval",
}


class RunConfig(dict):
    """Dict of typed settings; unknown keys are rejected on parse."""

    def synth_spec(self, split: str = "train") -> SynthSpec:
        seed = self["seed"] if split == "train" else self["seed"] + 1_000_000
        return SynthSpec(
            T=self["data.T"] if split == "train" else self["data.test_T"],
            D=self["data.D"],
            n_videos=self["data.n_videos"] if split == "train" else self["data.test_n_videos"],
            transient_len_range=(self["data.transient_min"], self["data.transient_max"]),
            sustained_len_range=(self["data.sustained_min"], self["data.sustained_max"]),
            anomaly_shift=self["data.anomaly_shift"],
            noise_sigma=self["data.noise_sigma"],
            anomalous_fraction=self["data.anomalous_fraction"],
            seed=seed,
        )

    def regime(self, prefix: str) -> TrainRegime:
        return TrainRegime(
            learning_rate=self[f"{prefix}.learning_rate"],
            steps=self[f"{prefix}.steps"],
            batch_size=self[f"{prefix}.batch_size"],
            topk_ratio=self[f"{prefix}.topk_ratio"],
            lambda_gmp=self.get(f"{prefix}.lambda_gmp", 0.0),
            beta1=self[f"{prefix}.beta1"],
            beta2=self[f"{prefix}.beta2"],
            weight_decay=self[f"{prefix}.weight_decay"],
            seed=self["seed"],
        )


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg["infer.mode"] not in INFER_MODES:
        raise ConfigError(f"infer.mode must be one of {INFER_MODES}")
    if cfg["infer.window_len"] < 1 or not 1 <= cfg["infer.stride"] <= cfg["infer.window_len"]:
        raise ConfigError("need infer.window_len >= 1 and 1 <= infer.stride <= infer.window_len")
    for prefix in ("sens", "cons", "unified"):
        try:
            cfg.regime(prefix).validate()
        except ValueError as exc:
            raise ConfigError(f"{prefix}: {exc}") from exc
    try:
        cfg.synth_spec("train").validate()
        cfg.synth_spec("test").validate()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key in DEFAULTS:
        v = cfg[key]
        lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
