"""Line-oriented key=value run configuration with dotted namespaces.

Every key has a documented default; an empty file is a valid config. Unknown
keys are rejected by name. A resolved snapshot (all defaults expanded) is
written next to every run's artifacts so reruns are reproducible from the
snapshot alone.
"""

from .data import SyntheticDatasetSpec
from .space import GridTriple, SpaceConfig
from .trainer import TrainConfig
from .vit import ToyViTConfig


class ConfigError(Exception):
    pass


DEFAULTS = {
    # toy supernet
    "model.image_size": 32,
    "model.patch_size": 4,
    "model.channels": 1,
    "model.embed_dim": 32,
    "model.depth": 2,
    "model.heads": 4,
    "model.head_dim": 8,
    "model.mlp_dim": 64,
    "model.classes": 4,
    # candidate grids (lo, hi, step) as width ratios; heads in counts
    "space.qkv_lo": 0.25, "space.qkv_hi": 1.0, "space.qkv_step": 0.125,
    "space.mlp_lo": 0.25, "space.mlp_hi": 1.0, "space.mlp_step": 0.125,
    "space.pe_lo": 0.5, "space.pe_hi": 1.0, "space.pe_step": 0.03125,
    "space.head_lo": 1, "space.head_step": 2,
    # search loop
    "trainer.epochs": 40,
    "trainer.warmup_epochs": -1,
    "trainer.batch_size": 16,
    "trainer.lr_main": 1e-3,
    "trainer.lr_score": 1e-3,
    "trainer.beta1_score": 0.5,
    "trainer.weight_decay": 0.0,
    "trainer.tau": 0.5,
    "trainer.mu1": 0.5,
    "trainer.mu2": 100.0,
    "trainer.mu3": 2e-5,
    "trainer.eta": 0.2,
    "trainer.prune_interval": -1,
    "trainer.finish_tolerance": 0.05,
    "trainer.onehot_tol": 1e-3,
    "trainer.seed": 0,
    "trainer.lambda_fixed": -1.0,
    "trainer.retrain_epochs": 15,
    "trainer.keep_rec_after_finish": True,
    # progressive patch masking
    "masking.gamma_start": 0.01,
    "masking.gamma_end": 0.25,
    # synthetic dataset
    "data.generator": "gaussian-blobs",
    "data.n_train": 2048,
    "data.n_eval": 512,
    "data.noise_sigma": 0.25,
    "data.seed": 7,
    "data.path": "",
}


def _coerce(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}")


def parse_config(path=None, overrides=None):
    """Resolve a config file (or nothing) plus overrides to a full key map."""
    cfg = dict(DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(open(path), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"override: unknown key {key!r}")
        cfg[key] = value
    return cfg


def write_resolved(cfg, path):
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def model_config(cfg):
    return ToyViTConfig(
        image_size=cfg["model.image_size"], patch_size=cfg["model.patch_size"],
        channels=cfg["model.channels"], embed_dim=cfg["model.embed_dim"],
        depth=cfg["model.depth"], heads=cfg["model.heads"],
        head_dim=cfg["model.head_dim"], mlp_dim=cfg["model.mlp_dim"],
        classes=cfg["model.classes"])


def space_config(cfg):
    return SpaceConfig(
        qkv=GridTriple(cfg["space.qkv_lo"], cfg["space.qkv_hi"], cfg["space.qkv_step"]),
        mlp=GridTriple(cfg["space.mlp_lo"], cfg["space.mlp_hi"], cfg["space.mlp_step"]),
        patch_embed=GridTriple(cfg["space.pe_lo"], cfg["space.pe_hi"], cfg["space.pe_step"]),
        head_lo=cfg["space.head_lo"], head_step=cfg["space.head_step"])


def train_config(cfg):
    return TrainConfig(
        epochs=cfg["trainer.epochs"], warmup_epochs=cfg["trainer.warmup_epochs"],
        batch_size=cfg["trainer.batch_size"], lr_main=cfg["trainer.lr_main"],
        lr_score=cfg["trainer.lr_score"], beta1_score=cfg["trainer.beta1_score"],
        weight_decay=cfg["trainer.weight_decay"], tau=cfg["trainer.tau"],
        mu1=cfg["trainer.mu1"], mu2=cfg["trainer.mu2"], mu3=cfg["trainer.mu3"],
        eta=cfg["trainer.eta"], prune_interval=cfg["trainer.prune_interval"],
        finish_tolerance=cfg["trainer.finish_tolerance"],
        onehot_tol=cfg["trainer.onehot_tol"], seed=cfg["trainer.seed"],
        lambda_fixed=cfg["trainer.lambda_fixed"],
        gamma_start=cfg["masking.gamma_start"], gamma_end=cfg["masking.gamma_end"],
        retrain_epochs=cfg["trainer.retrain_epochs"],
        keep_rec_after_finish=cfg["trainer.keep_rec_after_finish"])


def data_spec(cfg):
    return SyntheticDatasetSpec(
        n_train=cfg["data.n_train"], n_eval=cfg["data.n_eval"],
        classes=cfg["model.classes"], image_size=cfg["model.image_size"],
        channels=cfg["model.channels"], generator=cfg["data.generator"],
        noise_sigma=cfg["data.noise_sigma"], seed=cfg["data.seed"])
