"""Cascaded data-consistent imputation network.

Each cascade stage overwrites the running estimate with the observed spots
(data consistency) and adds the residual predicted by a residual dense
hybrid attention network (RDHAN). The model is single channel and fully
convolutional apart from windowed attention, so one set of weights runs at
every resolution whose sides are multiples of the window size.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .sampling import upsample


@dataclass
class CdcinConfig:
    num_cascades: int = 3
    num_rdhab: int = 8
    channels: int = 32
    rdb_growth: int = 32
    rdb_layers: int = 4
    window_size: int = 8
    num_heads: int = 4
    cab_alpha: float = 0.01
    mlp_ratio: float = 2.0
    use_hab: bool = True
    use_dc: bool = True
    final_dc_at_inference: bool = True
    cab_compress: int = 3
    cab_squeeze: int = 16
    hab_mlp_residual: bool = True
    shared_weights: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_cascades < 1:
            raise ConfigError("num_cascades must be >= 1")
        if self.num_rdhab < 1 or self.rdb_layers < 1 or self.rdb_growth < 1:
            raise ConfigError("num_rdhab, rdb_layers and rdb_growth must be >= 1")
        if self.channels < 1 or self.channels % self.num_heads:
            raise ConfigError(f"channels={self.channels} not divisible by num_heads={self.num_heads}")
        if self.cab_alpha < 0:
            raise ConfigError("cab_alpha must be >= 0")
        if self.cab_compress < 1 or self.channels < self.cab_compress:
            raise ConfigError(f"channels={self.channels} too small for cab_compress={self.cab_compress}")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def dc_layer(estimate, observed_lr, mask):
    """Replace the estimate at sampled positions by the observations.

    Equivalent to ``estimate * (1 - M) + scatter(observed, M)`` but written as
    an indexed overwrite, so sampled positions are bit-equal to the input.
    """
    if tuple(estimate.shape[-2:]) != mask.shape:
        raise ShapeError(f"estimate {tuple(estimate.shape[-2:])} does not match mask {mask.shape}")
    if tuple(observed_lr.shape[-2:]) != mask.compact_shape:
        raise ShapeError(f"observations {tuple(observed_lr.shape[-2:])} do not match {mask.compact_shape}")
    if isinstance(estimate, torch.Tensor):
        out = estimate.clone()
        out[mask.slices] = observed_lr.to(out.dtype)
    else:
        out = np.array(estimate, copy=True)
        out[mask.slices] = observed_lr
    return out


def conv3x3(cin, cout):
    # reflect padding keeps constant fields constant at patch borders
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")


class RDB(nn.Module):
    """Residual dense block: densely connected 3x3 convs, 1x1 fusion, local residual."""

    def __init__(self, channels, growth, layers):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(conv3x3(channels + i * growth, growth) for i in range(layers))
        self.fusion = nn.Conv2d(channels + layers * growth, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"RDB expects {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, 1))))
        return self.fusion(torch.cat(feats, 1)) + x


class ChannelAttention(nn.Module):
    def __init__(self, channels, squeeze):
        super().__init__()
        hidden = max(1, channels // squeeze)
        self.down = nn.Conv2d(channels, hidden, 1)
        self.up = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.up(F.relu(self.down(pooled))))

    def forward(self, x):
        return x * self.gate(x)


class CAB(nn.Module):
    """conv -> GELU -> conv followed by squeeze-excitation channel gating."""

    def __init__(self, channels, compress=3, squeeze=16):
        super().__init__()
        mid = channels // compress
        if mid < 1:
            raise ConfigError(f"channels={channels} too small for compress={compress}")
        self.conv1 = conv3x3(channels, mid)
        self.conv2 = conv3x3(mid, channels)
        self.attention = ChannelAttention(channels, squeeze)

    def forward(self, x):
        return self.attention(self.conv2(F.gelu(self.conv1(x))))


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, b, h, w):
    c = windows.shape[-1]
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(ws):
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (ws - 1)
    return torch.from_numpy(rel[0] * (2 * ws - 1) + rel[1]).long()


def shift_attention_mask(h, w, ws, shift):
    """Additive mask (nW, N, N) blocking attention across cyclic-shift seams."""
    region = torch.zeros(1, h, w, 1)
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    label = 0
    for rs in cuts:
        for cs in cuts:
            region[:, rs, cs, :] = label
            label += 1
    win = window_partition(region, ws).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class WindowAttention(nn.Module):
    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("bias_index", relative_position_index(window_size), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        heads = self.num_heads
        qkv = self.qkv(x).reshape(bw, n, 3, heads, c // heads).permute(2, 0, 3, 1, 4)
        bias = self.bias_table[self.bias_index.view(-1)].view(n, n, heads).permute(2, 0, 1)
        nw = 1 if mask is None else mask.shape[0]
        if mask is not None:
            bias = bias.unsqueeze(0) + mask.to(bias.dtype).unsqueeze(1)
        q, k, v = (t.reshape(bw // nw, nw * heads, n, c // heads) for t in qkv)
        attn = (q * self.scale) @ k.transpose(-2, -1) + bias.reshape(1, nw * heads, n, n)
        out = (attn.softmax(dim=-1) @ v).reshape(bw, heads, n, c // heads)
        return self.proj(out.transpose(1, 2).reshape(bw, n, c))


class HAB(nn.Module):
    """Hybrid attention block: (shifted) window attention plus an alpha-scaled CAB.

    ``X2 = W-MSA(LN(X)) + alpha * CAB(LN(X)) + X`` then
    ``Y = MLP(LN(X2)) + X2``; the trailing ``+ X2`` is dropped when
    ``mlp_residual`` is false.
    """

    def __init__(self, dim, window_size, num_heads, shift=False, alpha=0.01, mlp_ratio=2.0,
                 compress=3, squeeze=16, mlp_residual=True):
        super().__init__()
        self.window_size = window_size
        self.shifted = shift
        self.alpha = alpha
        self.mlp_residual = mlp_residual
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.cab = CAB(dim, compress, squeeze)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self._masks = {}

    def shift_size(self, h, w):
        if not self.shifted or min(h, w) <= self.window_size:
            return 0
        return self.window_size // 2

    def _mask(self, h, w, shift, device):
        key = (h, w, shift, str(device))
        if key not in self._masks:
            self._masks[key] = shift_attention_mask(h, w, self.window_size, shift).to(device)
        return self._masks[key]

    def forward(self, x):
        b, c, h, w = x.shape
        ws = self.window_size
        if h % ws or w % ws:
            raise ShapeError(f"feature map {h}x{w} not divisible by window {ws}")
        tokens = x.permute(0, 2, 3, 1)
        x1 = self.norm1(tokens)

        shift = self.shift_size(h, w)
        shifted = torch.roll(x1, (-shift, -shift), (1, 2)) if shift else x1
        mask = self._mask(h, w, shift, x.device) if shift else None
        attn = self.attn(window_partition(shifted, ws), mask)
        attn = window_reverse(attn, ws, b, h, w)
        if shift:
            attn = torch.roll(attn, (shift, shift), (1, 2))

        conv = self.cab(x1.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        x2 = attn + self.alpha * conv + tokens
        y = self.fc2(F.gelu(self.fc1(self.norm2(x2))))
        if self.mlp_residual:
            y = y + x2
        return y.permute(0, 3, 1, 2)


class RDHAB(nn.Module):
    def __init__(self, cfg, shifted):
        super().__init__()
        self.rdb = RDB(cfg.channels, cfg.rdb_growth, cfg.rdb_layers)
        self.hab = None
        if cfg.use_hab:
            self.hab = HAB(cfg.channels, cfg.window_size, cfg.num_heads, shift=shifted,
                           alpha=cfg.cab_alpha, mlp_ratio=cfg.mlp_ratio, compress=cfg.cab_compress,
                           squeeze=cfg.cab_squeeze, mlp_residual=cfg.hab_mlp_residual)

    def forward(self, x):
        x = self.rdb(x)
        return self.hab(x) if self.hab is not None else x


class RDHAN(nn.Module):
    """Shallow conv, RDHAB chain, global fusion and residual, 1-channel reconstruction."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.channels
        self.window_size = cfg.window_size if cfg.use_hab else 1
        self.shallow = conv3x3(1, c)
        self.blocks = nn.ModuleList(RDHAB(cfg, shifted=bool(i % 2)) for i in range(cfg.num_rdhab))
        self.fusion = nn.Conv2d(cfg.num_rdhab * c, c, 1)
        self.fusion_conv = conv3x3(c, c)
        self.reconstruct = conv3x3(c, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.window_size or w % self.window_size:
            raise ShapeError(f"input {h}x{w} not divisible by window {self.window_size}")
        shallow = self.shallow(x)
        feats, out = [], shallow
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        fused = self.fusion_conv(self.fusion(torch.cat(feats, 1))) + shallow
        return self.reconstruct(fused)


def init_weights(module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention):
            nn.init.trunc_normal_(m.bias_table, std=0.02)
    for m in module.modules():
        if isinstance(m, RDHAN):
            nn.init.zeros_(m.reconstruct.weight)
            nn.init.zeros_(m.reconstruct.bias)


class CDCIN(nn.Module):
    """K-stage cascade of DC + RDHAN with residual accumulation."""

    def __init__(self, cfg=None, seed=None):
        super().__init__()
        self.cfg = cfg or CdcinConfig()
        n = 1 if self.cfg.shared_weights else self.cfg.num_cascades
        if seed is not None:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        self.stages = nn.ModuleList(RDHAN(self.cfg) for _ in range(n))
        init_weights(self)
        if seed is not None:
            torch.random.set_rng_state(gen_state)

    def restorer(self, k):
        return self.stages[0 if self.cfg.shared_weights else k]

    def forward(self, x_lr, mask, final_dc=False):
        """Run the cascade on ``x_lr`` of shape (B, 1, h, w).

        Returns the list of K stage outputs at the mask's resolution.
        """
        if x_lr.dim() != 4 or x_lr.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, h, w) input, got {tuple(x_lr.shape)}")
        if tuple(x_lr.shape[-2:]) != mask.compact_shape:
            raise ShapeError(f"input {tuple(x_lr.shape[-2:])} does not match mask {mask.shape}")
        est = upsample(x_lr, mask.stride)
        outputs = []
        for k in range(self.cfg.num_cascades):
            inp = dc_layer(est, x_lr, mask) if self.cfg.use_dc else est
            est = est + self.restorer(k)(inp)
            outputs.append(est)
        if final_dc:
            outputs[-1] = dc_layer(outputs[-1], x_lr, mask)
        return outputs


def cdcin_forward(model, x_lr, mask, final_dc=False):
    """Numpy convenience wrapper: 2D ``x_lr`` in, list of K 2D arrays out."""
    p = next(model.parameters())
    t = torch.as_tensor(np.asarray(x_lr), dtype=p.dtype, device=p.device)[None, None]
    with torch.no_grad():
        outs = model(t, mask, final_dc=final_dc)
    return [o[0, 0].cpu().numpy() for o in outs]


def zero_parameters(model):
    """Zero every weight and bias, keeping LayerNorm gains at 1."""
    with torch.no_grad():
        for m in model.modules():
            for name, p in m.named_parameters(recurse=False):
                if isinstance(m, nn.LayerNorm) and name == "weight":
                    p.fill_(1.0)
                else:
                    p.zero_()
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def check_input_size(cfg, side, stride):
    """Raise ShapeError unless a (side/stride -> side) forward is well posed."""
    if side % stride:
        raise ShapeError(f"side {side} not divisible by stride {stride}")
    ws = cfg.window_size if cfg.use_hab else 1
    if side % ws:
        raise ShapeError(f"side {side} not divisible by window {ws}")
