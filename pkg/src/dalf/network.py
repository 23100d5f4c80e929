"""Hourglass backbone, warper head, polar patch CNN and attention fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import bilinear_sample, control_point_grid, make_polar_grid, tps_warp_points

DESCRIPTOR_KINDS = ("distinct", "invariant", "fused")


@dataclass
class ModelConfig:
    in_channels: int = 1
    enc_channels: tuple = (16, 32, 64, 128)
    d: int = 64
    d_inv: int = 64
    warper_channels: int = 128  # 2d
    tps_hidden: int = 128
    tps_grid: int = 8  # n_c = tps_grid ** 2
    patch_channels: tuple = (32, 32, 64, 64, 64)
    n_radial: int = 8
    n_angular: int = 16
    patch_radius_px: float = 16.0
    fusion_hidden: int = 128
    attention: bool = True
    descriptor: str = "fused"  # distinct | invariant | fused

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.patch_channels = tuple(self.patch_channels)
        if self.descriptor not in DESCRIPTOR_KINDS:
            raise ValueError(f"unknown descriptor kind {self.descriptor!r}")

    @property
    def n_c(self) -> int:
        return self.tps_grid ** 2

    @property
    def tps_param_len(self) -> int:
        return 6 + 2 * self.n_c

    @property
    def fused_dim(self) -> int:
        return self.d + self.d_inv

    @property
    def output_dim(self) -> int:
        return {"distinct": self.d, "invariant": self.d_inv, "fused": self.fused_dim}[
            self.descriptor]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["enc_channels"] = list(self.enc_channels)
        out["patch_channels"] = list(self.patch_channels)
        return out


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    """Two (conv 3x3 -> ReLU -> BN) units."""
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True),
        nn.BatchNorm2d(cout),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(cout),
    )


class Encoder(nn.Module):
    def __init__(self, cin: int, widths: tuple):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = conv_block(cin, w0)
        self.down1 = conv_block(w0, w1)
        self.down2 = conv_block(w1, w2)
        self.down3 = conv_block(w2, w3)

    def forward(self, x):
        s0 = self.stem(x)
        s1 = self.down1(F.max_pool2d(s0, 2))
        s2 = self.down2(F.max_pool2d(s1, 2))
        s3 = self.down3(F.max_pool2d(s2, 2))
        return s0, s1, s2, s3


class Decoder(nn.Module):
    """Mid-level features X at 1/8 scale, then three upsampling blocks to full res."""

    def __init__(self, widths: tuple, d: int):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.mid = conv_block(w3, d)
        self.up1 = conv_block(d + w2, w2)
        self.up2 = conv_block(w2 + w1, w1)
        self.up3 = conv_block(w1 + w0, w0)
        self.head = nn.Conv2d(w0, 1, 1)

    def forward(self, skips):
        s0, s1, s2, s3 = skips
        x = self.mid(s3)
        y = self.up1(torch.cat([_up(x, s2), s2], 1))
        y = self.up2(torch.cat([_up(y, s1), s1], 1))
        y = self.up3(torch.cat([_up(y, s0), s0], 1))
        return x, self.head(y)[:, 0]


def _up(x, ref):
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class WarperHead(nn.Module):
    """Strided block mapping X (1/8, d) to the TPS parameter tensor (1/16, 2d)."""

    def __init__(self, d: int, cout: int):
        super().__init__()
        self.block = conv_block(d, cout, stride=2)

    def forward(self, x):
        return self.block(x)


class TpsMLP(nn.Module):
    def __init__(self, cin: int, hidden: int, n_out: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, hidden), nn.ReLU(inplace=True))
        self.out = nn.Linear(hidden, n_out)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, v):
        return self.out(self.net(v))


class PolarConv(nn.Module):
    """3x3 conv with circular padding on the angular axis, zeros on the radial axis."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=0)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.pad(x, (1, 1, 0, 0), mode="circular")
        x = F.pad(x, (0, 0, 1, 1))
        return self.bn(F.relu(self.conv(x)))


class PatchCNN(nn.Module):
    """L2-Net-style stack on (radial x angular) patches, pooled over the angular axis."""

    def __init__(self, cin: int, channels: tuple, n_radial: int, d_out: int):
        super().__init__()
        layers = []
        prev = cin
        for ch in channels:
            layers.append(PolarConv(prev, ch))
            prev = ch
        self.layers = nn.Sequential(*layers)
        self.proj = nn.Linear(prev * n_radial, d_out)

    def forward(self, patches):
        # per-patch standardization
        mu = patches.mean(dim=(1, 2, 3), keepdim=True)
        sd = patches.std(dim=(1, 2, 3), keepdim=True)
        x = (patches - mu) / (sd + 1e-4)
        x = self.layers(x)
        x = x.mean(dim=3)  # angular average pooling
        return self.proj(x.flatten(1))


class FusionMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, dim))

    def forward(self, v):
        return torch.sigmoid(self.net(v))


@dataclass
class BackboneOutput:
    features_x: torch.Tensor  # (B, d, h/8, w/8)
    heatmap: torch.Tensor  # (B, h, w) logits


@dataclass
class DescriptorSet:
    rows: torch.Tensor  # (N, D), unit norm
    kind: str
    flags: torch.Tensor | None = field(default=None)  # invariant: >50% invalid samples

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


class DALFNet(nn.Module):
    """Full model. Keypoint coordinates are ``(x, y)`` pixels of the input image."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = Encoder(cfg.in_channels, cfg.enc_channels)
        self.decoder = Decoder(cfg.enc_channels, cfg.d)
        self.warper = WarperHead(cfg.d, cfg.warper_channels)
        self.tps_mlp = TpsMLP(cfg.warper_channels, cfg.tps_hidden, cfg.tps_param_len)
        self.patch_cnn = PatchCNN(cfg.in_channels, cfg.patch_channels, cfg.n_radial, cfg.d_inv)
        self.fusion = FusionMLP(cfg.fused_dim, cfg.fusion_hidden)
        self.register_buffer("control_points", control_point_grid(cfg.tps_grid,
                                                                  torch.float32))
        grid = make_polar_grid(cfg.n_radial, cfg.n_angular, 1.0, torch.float32)
        self.register_buffer("polar_grid", grid.coords.reshape(-1, 2))
        self.register_buffer("identity_affine", torch.tensor([[1.0, 0.0, 0.0],
                                                              [0.0, 1.0, 0.0]]))

    # -- backbone ------------------------------------------------------------
    def backbone(self, image: torch.Tensor) -> BackboneOutput:
        """``image (B, c, h, w)``; padded to a multiple of 16, heatmap cropped back."""
        h, w = image.shape[-2:]
        ph, pw = (-h) % 16, (-w) % 16
        x = F.pad(image, (0, pw, 0, ph)) if ph or pw else image
        feats, heat = self.decoder(self.encoder(x))
        return BackboneOutput(feats, heat[:, :h, :w])

    def warper_params(self, features_x: torch.Tensor) -> torch.Tensor:
        return self.warper(features_x)

    # -- descriptors ---------------------------------------------------------
    def describe_distinct(self, features_x: torch.Tensor, keypoints: torch.Tensor):
        """``features_x (d, h/8, w/8)``; keypoints (N, 2) -> unit rows (N, d)."""
        v = _sample_feature_map(features_x, keypoints, 8)
        return F.normalize(v, dim=-1)

    def keypoint_tps(self, field: torch.Tensor, keypoints: torch.Tensor):
        """Decode per-keypoint TPS parameters: affine (N, 2, 3), weights (N, n_c, 2)."""
        vec = _sample_feature_map(field, keypoints, 16)
        return self.decode_tps(self.tps_mlp(vec))

    def decode_tps(self, mu: torch.Tensor):
        n = mu.shape[0]
        affine = self.identity_affine.to(mu.dtype) + mu[:, :6].reshape(n, 2, 3)
        weights = mu[:, 6:].reshape(n, self.config.n_c, 2)
        return affine, weights

    def sample_polar_patches(self, image: torch.Tensor, keypoints: torch.Tensor,
                             affine: torch.Tensor, weights: torch.Tensor):
        """Warp the polar grid per keypoint and sample ``image (c, h, w)``.

        Returns patches (N, c, n_radial, n_angular) and the fraction of
        out-of-image samples per keypoint.
        """
        cfg = self.config
        n = keypoints.shape[0]
        grid = self.polar_grid.to(affine.dtype).expand(n, -1, -1)
        warped = tps_warp_points(affine, weights, self.control_points.to(affine.dtype), grid)
        coords = keypoints.to(affine.dtype).unsqueeze(1) + cfg.patch_radius_px * warped
        vals, inside = bilinear_sample(image.permute(1, 2, 0), coords)
        patches = vals.permute(0, 2, 1).reshape(n, image.shape[0], cfg.n_radial, cfg.n_angular)
        return patches, 1.0 - inside.to(affine.dtype).mean(dim=1)

    def describe_patches(self, patches: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.patch_cnn(patches), dim=-1)

    def describe_invariant(self, image: torch.Tensor, keypoints: torch.Tensor,
                           field: torch.Tensor):
        affine, weights = self.keypoint_tps(field, keypoints)
        patches, invalid = self.sample_polar_patches(image, keypoints, affine, weights)
        return self.describe_patches(patches), invalid > 0.5

    def fuse(self, distinct: torch.Tensor, invariant: torch.Tensor) -> torch.Tensor:
        if distinct.shape[0] != invariant.shape[0]:
            raise ValueError(f"fuse: row count mismatch {distinct.shape[0]} vs "
                             f"{invariant.shape[0]}")
        cat = torch.cat([distinct, invariant], dim=-1)
        if self.config.attention:
            cat = self.fusion(cat) * cat
        return F.normalize(cat, dim=-1)

    def describe(self, image: torch.Tensor, out: BackboneOutput, keypoints: torch.Tensor,
                 kinds=("fused",), index: int = 0) -> dict:
        """Descriptors of several kinds for one image of the batch."""
        res = {}
        need_inv = any(k in ("invariant", "fused") for k in kinds)
        need_dist = any(k in ("distinct", "fused") for k in kinds)
        if need_dist:
            res["distinct"] = self.describe_distinct(out.features_x[index], keypoints)
        if need_inv:
            field = self.warper_params(out.features_x[index:index + 1])[0]
            res["invariant"], res["invalid_flags"] = self.describe_invariant(
                image[index], keypoints, field)
        if "fused" in kinds:
            res["fused"] = self.fuse(res["distinct"], res["invariant"])
        return res

    def encoder_parameters(self):
        return self.encoder.parameters()

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


ModelState = DALFNet


def _sample_feature_map(fmap: torch.Tensor, keypoints: torch.Tensor, stride: int):
    """Bilinear lookup of ``fmap (C, h', w')`` at pixel keypoints.

    Cell ``j`` of a stride-``s`` map is centered on pixel ``s * j + (s - 1) / 2``;
    lookups are clamped to the map extent (border replicate).
    """
    c, hh, ww = fmap.shape
    kp = keypoints.to(fmap.dtype)
    u = (kp - (stride - 1) / 2.0) / stride
    u = torch.stack([u[:, 0].clamp(0, ww - 1), u[:, 1].clamp(0, hh - 1)], dim=-1)
    vals, _ = bilinear_sample(fmap.permute(1, 2, 0), u)
    return vals


# -- functional surface -------------------------------------------------------

def _as_batch(image) -> torch.Tensor:
    t = torch.as_tensor(image, dtype=torch.float32)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    return t


def backbone_forward(state: DALFNet, image) -> BackboneOutput:
    return state.backbone(_as_batch(image).to(next(state.parameters()).dtype))


def warper_params(state: DALFNet, features_x: torch.Tensor) -> torch.Tensor:
    return state.warper_params(features_x)


def describe_distinct(state: DALFNet, features_x: torch.Tensor, keypoints) -> DescriptorSet:
    kp = torch.as_tensor(keypoints)
    fx = features_x[0] if features_x.dim() == 4 else features_x
    return DescriptorSet(state.describe_distinct(fx, kp), "distinct")


def describe_invariant(state: DALFNet, image, keypoints, field: torch.Tensor) -> DescriptorSet:
    img = _as_batch(image)[0].to(field.dtype)
    fld = field[0] if field.dim() == 4 else field
    rows, flags = state.describe_invariant(img, torch.as_tensor(keypoints), fld)
    return DescriptorSet(rows, "invariant", flags)


def fuse(state: DALFNet, distinct: DescriptorSet, invariant: DescriptorSet) -> DescriptorSet:
    return DescriptorSet(state.fuse(distinct.rows, invariant.rows), "fused")
