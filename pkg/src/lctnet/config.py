"""Flat `key = value` run configuration.

The format is deliberately plain: UTF-8 lines, `#` starts a comment, keys
are dotted (`train.lr0 = 0.1`), unknown or repeated keys are errors.  A
RunConfig resolves a model preset (or inline spec fields), the attention
settings, the optimizer recipe, and the dataset source into ready-to-use
objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import AttentionConfig
from .backbone import PRESETS, NetworkSpec, StageSpec
from .train import TrainConfig, default_schedule


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_int(v: str) -> int:
    try:
        return int(v)
    except ValueError as e:
        raise ConfigError(f"expected an integer, got {v!r}") from e


def _parse_float(v: str) -> float:
    try:
        return float(v)
    except ValueError as e:
        raise ConfigError(f"expected a number, got {v!r}") from e


def _parse_triple(v: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in v.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated integers, got {v!r}")
    return tuple(_parse_int(p) for p in parts)  # type: ignore[return-value]


def _parse_stages(v: str) -> list[StageSpec]:
    stages = []
    for part in v.split(";"):
        part = part.strip()
        if not part:
            continue
        fields = [f.strip() for f in part.split(",")]
        if len(fields) != 4:
            raise ConfigError(
                f"stage {part!r} must be blocks,channels,kind,stride")
        stages.append(StageSpec(_parse_int(fields[0]), _parse_int(fields[1]),
                                fields[2], _parse_int(fields[3])))
    if not stages:
        raise ConfigError(f"no stages in {v!r}")
    return stages


def _parse_schedule(v: str) -> list[tuple[int, float]]:
    v = v.strip()
    if not v or v == "none":
        return []
    out = []
    for part in v.split(","):
        if ":" not in part:
            raise ConfigError(f"schedule entry {part!r} must be epoch:multiplier")
        e, m = part.split(":", 1)
        out.append((_parse_int(e.strip()), _parse_float(m.strip())))
    return out


def _stages_to_str(stages: list[StageSpec]) -> str:
    return ";".join(f"{s.blocks},{s.channels},{s.kind},{s.stride}" for s in stages)


ATTENTION_ALIASES = {"se+": "se_plus"}

# key -> default as string, or None when the default comes from elsewhere
KNOWN_KEYS = (
    "model.preset", "model.stem", "model.stages", "model.classes",
    "model.input", "model.stem_pool",
    "attention.kind", "attention.groups", "attention.reduction",
    "attention.epsilon", "attention.init",
    "attention.skip_normalize", "attention.skip_transform",
    "train.lr0", "train.momentum", "train.weight_decay", "train.epochs",
    "train.batch_size", "train.schedule", "train.hflip", "train.pad_crop",
    "data.kind", "data.seed", "data.n", "data.classes", "data.val_n",
    "data.path", "data.val_path",
    "run.seed", "run.out",
)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key = value lines into a mapping, rejecting unknown keys."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: repeated key {key!r}")
        out[key] = val
    return out


@dataclass
class RunConfig:
    spec: NetworkSpec
    train: TrainConfig
    data_kind: str = "synth"
    data_seed: int = 1
    data_n: int = 2000
    data_classes: int = 10
    data_val_n: int = 500
    data_path: str = ""
    data_val_path: str = ""
    seed: int = 1
    out: str = "runs/out"


def run_config_from_mapping(kv: dict[str, str]) -> RunConfig:
    """Resolve a key mapping into a RunConfig (preset first, overrides after)."""
    for key in kv:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    preset = kv.get("model.preset", "resnet-mini")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    spec = PRESETS[preset]()
    if "model.stem" in kv:
        spec.stem = _parse_triple(kv["model.stem"])
    if "model.stages" in kv:
        spec.stages = _parse_stages(kv["model.stages"])
    if "model.classes" in kv:
        spec.num_classes = _parse_int(kv["model.classes"])
    if "model.input" in kv:
        spec.input_geometry = _parse_triple(kv["model.input"])
    if "model.stem_pool" in kv:
        spec.stem_pool = _parse_bool(kv["model.stem_pool"])

    kind = kv.get("attention.kind", "none")
    kind = ATTENTION_ALIASES.get(kind, kind)
    attn = AttentionConfig(kind=kind)
    if "attention.groups" in kv:
        attn.groups = _parse_int(kv["attention.groups"])
    if "attention.reduction" in kv:
        attn.reduction = _parse_int(kv["attention.reduction"])
    if "attention.epsilon" in kv:
        attn.epsilon = _parse_float(kv["attention.epsilon"])
    if "attention.init" in kv:
        attn.init_mode = kv["attention.init"]
    if "attention.skip_normalize" in kv:
        attn.skip_normalize = _parse_bool(kv["attention.skip_normalize"])
    if "attention.skip_transform" in kv:
        attn.skip_transform = _parse_bool(kv["attention.skip_transform"])
    spec.attention = attn

    epochs = _parse_int(kv.get("train.epochs", "10"))
    schedule = (_parse_schedule(kv["train.schedule"]) if "train.schedule" in kv
                else default_schedule(epochs))
    seed = _parse_int(kv.get("run.seed", "1"))
    train = TrainConfig(
        lr0=_parse_float(kv.get("train.lr0", "0.1")),
        momentum=_parse_float(kv.get("train.momentum", "0.9")),
        weight_decay=_parse_float(kv.get("train.weight_decay", "0.0001")),
        schedule=schedule,
        epochs=epochs,
        batch_size=_parse_int(kv.get("train.batch_size", "64")),
        seed=seed,
        hflip=_parse_bool(kv.get("train.hflip", "true")),
        pad_crop=_parse_bool(kv.get("train.pad_crop", "true")),
        source=kv.get("data.kind", "synth"),
    )
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e

    cfg = RunConfig(
        spec=spec,
        train=train,
        data_kind=kv.get("data.kind", "synth"),
        data_seed=_parse_int(kv.get("data.seed", "1")),
        data_n=_parse_int(kv.get("data.n", "2000")),
        data_classes=_parse_int(kv.get("data.classes", "10")),
        data_val_n=_parse_int(kv.get("data.val_n", "500")),
        data_path=kv.get("data.path", ""),
        data_val_path=kv.get("data.val_path", ""),
        seed=seed,
        out=kv.get("run.out", "runs/out"),
    )
    if cfg.data_kind not in ("synth", "cifar10"):
        raise ConfigError(f"data.kind must be synth or cifar10, got {cfg.data_kind!r}")
    return cfg


def load_run_config(path: str, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    kv = parse_config_text(text, source=path)
    if overrides:
        kv.update(overrides)
    return run_config_from_mapping(kv)


def network_spec_to_mapping(spec: NetworkSpec) -> dict[str, str]:
    """Serialize a NetworkSpec to config keys (round-trips through the parser)."""
    c, h, w = spec.input_geometry
    kv = {
        "model.stem": f"{spec.stem[0]},{spec.stem[1]},{spec.stem[2]}",
        "model.stages": _stages_to_str(spec.stages),
        "model.classes": str(spec.num_classes),
        "model.input": f"{c},{h},{w}",
        "model.stem_pool": "true" if spec.stem_pool else "false",
        "attention.kind": spec.attention.kind,
    }
    if spec.attention.kind != "none":
        a = spec.attention
        kv.update({
            "attention.groups": str(a.groups),
            "attention.reduction": str(a.reduction),
            "attention.epsilon": f"{a.epsilon:.9g}",
            "attention.init": a.init_mode,
            "attention.skip_normalize": "true" if a.skip_normalize else "false",
            "attention.skip_transform": "true" if a.skip_transform else "false",
        })
    return kv
