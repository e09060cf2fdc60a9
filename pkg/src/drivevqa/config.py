"""Flat key=value run configuration.

A config file is plain text: one `key = value` per line, `#` comments and
blank lines ignored. Every key must be known; values are coerced to the type
of the built-in default. `load_config(None)` returns the defaults.
"""

DEFAULTS = {
    # reproducibility / data
    "seed": 0,
    "views": 1,
    "input_size": 224,
    "num_classes": 11,
    "train_ratio": 0.7,
    "val_ratio": 0.2,
    "test_ratio": 0.1,
    "question_cap": 75,
    "answer_cap": 128,
    # sequence model
    "d_model": 256,
    "num_heads": 4,
    "encoder_layers": 2,
    "decoder_layers": 2,
    "ffn_multiplier": 4,
    "dropout": 0.2,
    "max_positions": 256,
    # token routing
    "router_max_tokens": 64,
    "center_boost": 1.2,
    # replay buffer
    "buffer_alpha": 0.6,
    "buffer_beta0": 0.4,
    "buffer_beta_rate": 0.001,
    "priority_loss_weight": 0.5,
    "priority_uncertainty_weight": 0.3,
    "priority_diversity_weight": 0.2,
    "refresh_every": 5,
    # language phase
    "lang_epochs": 15,
    "lang_batch": 4,
    "lang_lr": 1e-3,
    "encoder_lr": 1e-4,
    "weight_decay": 0.01,
    "lr_gamma": 0.9,
    # vision phase
    "vision_epochs": 100,
    "vision_batch": 16,
    "vision_lr": 1e-3,
    "aug_shift_x": 64,
    "aug_shift_y": 24,
    # evaluation
    "eval_subset": 120,
}


def _coerce(key, raw, default):
    kind = type(default)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse "
                         f"{raw!r} as {kind.__name__}") from None


def parse_config(text, defaults=None):
    cfg = dict(DEFAULTS if defaults is None else defaults)
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"config line {lineno}: expected key = value, "
                             f"got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in cfg:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, raw, cfg[key])
    return cfg


def load_config(path=None, overrides=None):
    """Read a config file (or take defaults) and apply overrides last."""
    if path is None:
        cfg = dict(DEFAULTS)
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = value
    _validate(cfg)
    return cfg


def _validate(cfg):
    ratios = cfg["train_ratio"] + cfg["val_ratio"] + cfg["test_ratio"]
    if abs(ratios - 1.0) > 1e-9:
        raise ValueError(f"split ratios sum to {ratios}, expected 1.0")
    for key in ("lang_epochs", "lang_batch", "vision_epochs", "vision_batch",
                "router_max_tokens", "views", "refresh_every"):
        if cfg[key] < 1:
            raise ValueError(f"config key {key!r} must be >= 1, got {cfg[key]}")
    wsum = (cfg["priority_loss_weight"] + cfg["priority_uncertainty_weight"]
            + cfg["priority_diversity_weight"])
    if abs(wsum - 1.0) > 1e-9:
        raise ValueError(f"priority weights sum to {wsum}, expected 1.0")
    for key in ("aug_shift_x", "aug_shift_y"):
        if cfg[key] < 0:
            raise ValueError(f"config key {key!r} must be >= 0, got {cfg[key]}")


def format_config(cfg):
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"
