"""Parameter naming and initialization.

Every trainable array lives in one flat `dict[str, Tensor]`. Names are dotted
paths (`text.l0.q.w`, `vision.conv2.b`, ...), which is also the order-free key
used by the optimizer state and the checkpoint records.
"""

import typing as t

import numpy as np

from docline.encoders.config import ModelConfig
from docline.numkit.tensor import Tensor

Params = dict[str, Tensor]

LAYOUT_TABLES = ("x0", "y0", "x1", "y1", "w", "h")
REL_TABLES = ("rel_1d", "rel_x", "rel_y")


def _dense(rng: np.random.Generator, cfg: ModelConfig, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, cfg.init_std, size=(fan_in, fan_out))


def _conv(rng: np.random.Generator, shape: tuple[int, int, int, int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_linear(out: dict[str, np.ndarray], rng: np.random.Generator, cfg: ModelConfig, name: str, fan_in: int, fan_out: int) -> None:
    out[f"{name}.w"] = _dense(rng, cfg, fan_in, fan_out)
    out[f"{name}.b"] = np.zeros(fan_out)


def _add_layer_norm(out: dict[str, np.ndarray], name: str, width: int) -> None:
    out[f"{name}.g"] = np.ones(width)
    out[f"{name}.b"] = np.zeros(width)


def _add_transformer(out: dict[str, np.ndarray], rng: np.random.Generator, cfg: ModelConfig, prefix: str, layers: int) -> None:
    d = cfg.hidden_dim
    for table in REL_TABLES:
        out[f"{prefix}.{table}"] = rng.normal(0.0, cfg.init_std, size=(cfg.heads, cfg.rel_buckets))
    for i in range(layers):
        layer = f"{prefix}.l{i}"
        _add_layer_norm(out, f"{layer}.ln1", d)
        for proj in ("q", "k", "v", "o"):
            _add_linear(out, rng, cfg, f"{layer}.{proj}", d, d)
        _add_layer_norm(out, f"{layer}.ln2", d)
        _add_linear(out, rng, cfg, f"{layer}.ffn1", d, cfg.ffn_dim)
        _add_linear(out, rng, cfg, f"{layer}.ffn2", cfg.ffn_dim, d)
    if layers:
        _add_layer_norm(out, f"{prefix}.ln_final", d)


def init_arrays(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    out: dict[str, np.ndarray] = {}

    out["emb.token"] = rng.normal(0.0, cfg.init_std, size=(cfg.vocab_size, d))
    out["emb.position"] = rng.normal(0.0, cfg.init_std, size=(cfg.max_tokens, d))
    out["emb.segment"] = rng.normal(0.0, cfg.init_std, size=(2, d))
    for table in LAYOUT_TABLES:
        out[f"emb.{table}"] = rng.normal(0.0, cfg.init_std, size=(cfg.layout_rows, d))

    _add_transformer(out, rng, cfg, "text", cfg.text_layers)

    in_channels = 1
    for j, channels in enumerate(cfg.conv_channels):
        out[f"vision.conv{j}.w"] = _conv(rng, (channels, in_channels, 3, 3), in_channels * 9)
        out[f"vision.conv{j}.b"] = np.zeros(channels)
        in_channels = channels
    _add_linear(out, rng, cfg, "vision.proj", in_channels, d)

    _add_linear(out, rng, cfg, "roi.fc1", in_channels, cfg.roi_hidden)
    _add_linear(out, rng, cfg, "roi.fc2", cfg.roi_hidden, d)

    up = [in_channels, *cfg.decoder_channels, 1]
    kernels = (2, 2, 4)
    for j, kernel in enumerate(kernels):
        out[f"decoder.up{j}.w"] = _conv(rng, (up[j], up[j + 1], kernel, kernel), up[j] * kernel * kernel)
        out[f"decoder.up{j}.b"] = np.zeros(up[j + 1])

    _add_transformer(out, rng, cfg, "fusion", cfg.fusion_layers)

    _add_linear(out, rng, cfg, "mlm", d, cfg.vocab_size)
    _add_linear(out, rng, cfg, "tgm", d, cfg.grid.size)
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    return as_params(init_arrays(cfg, seed))


def as_params(arrays: t.Mapping[str, np.ndarray]) -> Params:
    return {name: Tensor(array, requires_grad=True) for name, array in arrays.items()}


def to_arrays(params: t.Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: np.array(p.data) for name, p in params.items()}


def no_decay_names(names: t.Iterable[str]) -> set[str]:
    """Embedding and relative-bias tables, biases and layer-norm gains are not decayed."""
    return {
        name
        for name in names
        if name.startswith("emb.") or name.rsplit(".", 1)[-1] in ("b", "g", *REL_TABLES)
    }


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: array.shape for name, array in init_arrays(cfg, 0).items()}
