"""The lightweight extractor and the two detection branches.

Input windows are [T x mel] PCEN matrices treated as single-channel images.
The backbone reduces time x4 and mel x16; frame-rate outputs are recovered
by repeating each reduced-frame row (repeat-upsampling).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import SelectionError, ShapeError
from .framing import WindowBatch
from .ingest import RunConfig

TIME_REDUCTION = 4
MEL_REDUCTION = 16
# blocks 1-2 pool time and mel, blocks 3-4 pool mel only
_POOLS = ((2, 2), (2, 2), (1, 2), (1, 2))


def reduced_time(t: int) -> int:
    return math.ceil(math.ceil(t / 2) / 2)


class ConvBlock:
    """conv 3x3 (same pad) + BN + ReLU, then ceil-mode max pooling."""

    def __init__(self, cin: int, cout: int, pool, rng):
        scale = np.sqrt(2.0 / (cin * 9))
        self.w = ad.Tensor(rng.normal(0, scale, size=(cout, cin, 3, 3)),
                           requires_grad=True)
        self.b = ad.Tensor(np.zeros(cout), requires_grad=True)
        self.gamma = ad.Tensor(np.ones(cout), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(cout), requires_grad=True)
        self.bn_state = ad.BatchNormState(cout)
        self.pool = pool

    def parameters(self):
        return {"w": self.w, "b": self.b, "gamma": self.gamma, "beta": self.beta}

    def __call__(self, x, training: bool):
        x = ad.conv2d(x, self.w, self.b)
        x = ad.batchnorm2d(x, self.gamma, self.beta, self.bn_state, training)
        x = ad.relu(x)
        if self.pool != (1, 1):
            x = ad.maxpool2d(x, self.pool)
        return x


class Linear:
    def __init__(self, cin: int, cout: int, rng):
        scale = np.sqrt(2.0 / (cin + cout))
        self.w = ad.Tensor(rng.normal(0, scale, size=(cin, cout)),
                           requires_grad=True)
        self.b = ad.Tensor(np.zeros(cout), requires_grad=True)

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class ModelParams:
    """All learnable weights: backbone, transformer layer, three decoders."""

    def __init__(self, cfg: RunConfig, n_classes: int, seed: int = 0):
        self.cfg = cfg
        self.n_classes = n_classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE1]))
        ch, emb = cfg.channels, cfg.embed_dim
        self.blocks = [ConvBlock(1 if i == 0 else ch, ch, _POOLS[i], rng)
                       for i in range(4)]
        mel_red = cfg.mel_bands // MEL_REDUCTION
        self.embed_proj = Linear(ch * mel_red, emb, rng)
        self.tf_layer = ad.TransformerEncoderLayer(2 * emb, cfg.heads,
                                                   cfg.ffn_dim, rng)
        self.decoder_sed = Linear(emb, n_classes, rng)
        self.decoder_sfbc = Linear(2 * emb, 2, rng)
        self.decoder_bin = Linear(emb, 2, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {}
        for i, blk in enumerate(self.blocks):
            params.update({f"block{i}.{k}": v for k, v in blk.parameters().items()})
        params.update({f"embed_proj.{k}": v
                       for k, v in self.embed_proj.parameters().items()})
        params.update({f"tf.{k}": v for k, v in self.tf_layer.parameters().items()})
        params.update({f"decoder_sed.{k}": v
                       for k, v in self.decoder_sed.parameters().items()})
        params.update({f"decoder_sfbc.{k}": v
                       for k, v in self.decoder_sfbc.parameters().items()})
        params.update({f"decoder_bin.{k}": v
                       for k, v in self.decoder_bin.parameters().items()})
        return params

    def bn_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.running_mean"] = blk.bn_state.running_mean
            out[f"block{i}.running_var"] = blk.bn_state.running_var
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.data for k, p in self.parameters().items()}
        arrays.update(self.bn_arrays())
        return arrays

    def hyper(self) -> dict:
        c = self.cfg
        return {"channels": c.channels, "embed_dim": c.embed_dim,
                "heads": c.heads, "ffn_dim": c.ffn_dim,
                "mel_bands": c.mel_bands, "win_frames": c.win_frames,
                "n_classes": self.n_classes}

    def save(self, path):
        ad.save_checkpoint(path, self.state_arrays(), self.hyper())

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.parameters()
        for k, p in params.items():
            if k not in arrays:
                raise ShapeError(f"checkpoint missing {k}")
            if arrays[k].shape != p.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {k}")
            p.data = arrays[k].astype(np.float64).copy()
        for i, blk in enumerate(self.blocks):
            blk.bn_state.running_mean = arrays[f"block{i}.running_mean"].copy()
            blk.bn_state.running_var = arrays[f"block{i}.running_var"].copy()

    @classmethod
    def from_checkpoint(cls, path, cfg: RunConfig) -> "ModelParams":
        arrays, hyper = ad.load_checkpoint(path)
        import dataclasses

        cfg = dataclasses.replace(
            cfg, channels=int(hyper["channels"]), embed_dim=int(hyper["embed_dim"]),
            heads=int(hyper["heads"]), ffn_dim=int(hyper["ffn_dim"]),
            mel_bands=int(hyper["mel_bands"]), win_frames=int(hyper["win_frames"]))
        model = cls(cfg, int(hyper["n_classes"]), seed=0)
        model.load_arrays(arrays)
        return model

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def backbone_forward(model: ModelParams, window: np.ndarray,
                     training: bool = False) -> ad.Tensor:
    """[T x mel] PCEN window -> [T' x embed] embedding, T' = ceil(ceil(T/2)/2)."""
    t, mel = window.shape
    if mel != model.cfg.mel_bands:
        raise ShapeError(f"expected {model.cfg.mel_bands} mel bands, got {mel}")
    x = ad.Tensor(window.reshape(1, t, mel))
    for blk in model.blocks:
        x = blk(x, training)
    # [C x T' x mel'] -> [T' x C*mel']
    c, tr, mr = x.shape
    x = ad.reshape(ad.transpose(x, (1, 0, 2)), (tr, c * mr))
    return model.embed_proj(x)


def sed_forward(model: ModelParams, emb: ad.Tensor, target: int) -> ad.Tensor:
    """Per reduced frame class logits, upsampled to `target` frames."""
    return ad.repeat_upsample(model.decoder_sed(emb), TIME_REDUCTION, target)


def bin_forward(model: ModelParams, emb: ad.Tensor, target: int) -> ad.Tensor:
    """Binary (fine-tune stage) logits, upsampled to `target` frames."""
    return ad.repeat_upsample(model.decoder_bin(emb), TIME_REDUCTION, target)


def tc_vector(window: np.ndarray, labels: np.ndarray, target_class: int) -> np.ndarray:
    """Zero every frame whose label differs from the target class."""
    keep = (np.asarray(labels) == target_class).astype(np.float64)
    return window * keep[:, None]


def select_tc_window(windows: list[WindowBatch], target_class: int,
                     current_index: int) -> int:
    """Nearest preceding window containing the class; falls back to the
    current window when no earlier one has it."""
    for i in range(current_index - 1, -1, -1):
        if np.any(windows[i].sed_labels == target_class):
            return i
    if np.any(windows[current_index].sed_labels == target_class):
        return current_index
    raise SelectionError(f"class {target_class} absent from clip windows")


def reduce_pos_mask(labels: np.ndarray, target_class: int, t_reduced: int) -> np.ndarray:
    """Frame labels -> reduced-frame 0/1 mask (1 if any covered frame is POS)."""
    mask = np.zeros(t_reduced)
    pos = np.flatnonzero(np.asarray(labels) == target_class)
    mask[np.unique(pos // TIME_REDUCTION)] = 1.0
    return mask


def sfbc_tokens(model: ModelParams, sed_emb: ad.Tensor,
                pos_center: ad.Tensor) -> ad.Tensor:
    """Stack the repeated POS-center channel with the SED embedding."""
    center_rep = ad.repeat_rows(pos_center, sed_emb.shape[0])
    return ad.concat([center_rep, sed_emb], axis=1)


def sfbc_forward(model: ModelParams, sed_emb: ad.Tensor, tc_emb: ad.Tensor,
                 tc_pos_mask: np.ndarray, target: int,
                 use_transformer: bool = True) -> ad.Tensor:
    """SFBC branch: TC-window POS-center conditioning -> frame logits [target x 2].

    The TC embedding collapses to its masked-mean POS center; every token is
    (center, sed_emb[t]) through the shared transformer layer and the SFBC
    decoder, then repeat-upsampled.
    """
    if not np.any(tc_pos_mask):
        raise SelectionError("TC window has no POS frames; center undefined")
    center = ad.masked_mean_rows(tc_emb, tc_pos_mask)
    tokens = sfbc_tokens(model, sed_emb, center)
    if use_transformer:
        tokens = model.tf_layer(tokens)
    return ad.repeat_upsample(model.decoder_sfbc(tokens), TIME_REDUCTION, target)
