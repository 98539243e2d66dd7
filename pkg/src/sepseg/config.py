"""Model/harness configuration: a typed record plus the `key = value` file format.

Unknown keys are rejected; architectural keys are required in every file, the
harness knobs fall back to defaults. Lists are comma-separated.
"""

from dataclasses import dataclass, field, fields

# Keys that every config file must carry (the architecture schema).
REQUIRED_KEYS = (
    "image_size", "patch_size", "embed_dim", "depth", "heads", "mlp_ratio",
    "tap_indices", "local_dim", "expand_ratio", "lhf_kernel",
    "sasm_groups", "sasm_group_dim", "num_classes", "decoder_depth",
)


@dataclass
class ModelConfig:
    # backbone
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    tap_indices: list = field(default_factory=lambda: [1, 3])
    # local path
    local_dim: int = 64
    expand_ratio: int = 2
    lhf_kernel: int = 5
    # sasm
    sasm_groups: int = 8
    sasm_group_dim: int = 8
    # decoder
    num_classes: int = 4
    decoder_depth: int = 2
    decoder_mlp_ratio: float = 4.0
    scale_init: float = 10.0
    # head variant
    decoder_kind: str = "dca"       # "dca" | "linear"
    use_boundary_loss: bool = False
    ignore_value: int = 255
    # harness
    seed: int = 42
    train_scenes: int = 2000
    eval_scenes: int = 200
    batch_size: int = 8
    steps: int = 1500
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    poly_power: float = 1.0
    new_param_lr_mult: float = 10.0
    noise_std: float = 0.02
    shapes_min: int = 3
    shapes_max: int = 6
    small_area_threshold: int = 160
    boundary_tol: int = 1
    log_interval: int = 50

    def validate(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.patch_size % 4:
            raise ValueError(f"patch_size {self.patch_size} must be a multiple of 4 "
                             "(the overlapping embedding uses stride patch/2, padding patch/4)")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        taps = list(self.tap_indices)
        if not taps:
            raise ValueError("tap_indices must be non-empty")
        if any(t < 0 or t >= self.depth for t in taps):
            raise ValueError(f"tap_indices {taps} out of range for depth {self.depth}")
        if taps != sorted(set(taps)):
            raise ValueError(f"tap_indices {taps} must be strictly increasing")
        if self.sasm_groups * self.sasm_group_dim != self.embed_dim:
            raise ValueError(f"sasm_groups*sasm_group_dim = {self.sasm_groups * self.sasm_group_dim} "
                             f"must equal embed_dim {self.embed_dim}")
        if self.lhf_kernel % 2 == 0 or self.lhf_kernel < 3:
            raise ValueError(f"lhf_kernel {self.lhf_kernel} must be odd and >= 3")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.decoder_kind not in ("dca", "linear"):
            raise ValueError(f"decoder_kind must be 'dca' or 'linear', got {self.decoder_kind!r}")
        if self.scale_init <= 0:
            raise ValueError("scale_init must be positive")
        return self

    @property
    def num_blocks(self) -> int:
        return len(self.tap_indices)


_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    base = ModelConfig()
    kind = type(getattr(base, name))
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name}: expected boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is list:
        if not raw:
            return []
        return [int(v.strip()) for v in raw.split(",")]
    return raw


def parse_config(text: str) -> ModelConfig:
    cfg = ModelConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, key, _parse_value(key, value))
    missing = [k for k in REQUIRED_KEYS if k not in seen]
    if missing:
        raise ValueError(f"config missing required keys: {missing}")
    return cfg.validate()


def render_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: ModelConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))
