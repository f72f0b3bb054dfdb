"""Reference LPIPS values for the synthetic weight containers.

Rebuilds the seeded synthetic weights independently of the Rust code, loads
them into torchvision's AlexNet / VGG-16 feature stacks, and evaluates the
distance exactly the way the `lpips` package (v0.1) does: ScalingLayer,
per-tap channel normalization with eps 1e-10, 1x1 linear layers, spatial mean,
sum over taps. Everything runs in float32 like the reference.

Usage: python make_golden.py  (writes golden_alex.json and golden_vgg.json)
"""

import base64
import hashlib
import json
import math
import os

import numpy as np
import torch
import torchvision

GAMMA = np.uint64(0x9E3779B97F4A7C15)
SHIFT = [-0.030, -0.088, -0.188]
SCALE = [0.458, 0.448, 0.450]
BIAS_RANGE = 0.05
CONTAINER_SEED = 20240601
IMAGE_SEED = 7
SIZE = 64

TAPS = {"alex": [64, 192, 384, 256, 256], "vgg": [64, 128, 256, 512, 512]}


class SplitMix:
    def __init__(self, seed):
        self.seed = np.uint64(seed)
        self.count = 0

    def units(self, n):
        with np.errstate(over="ignore"):
            k = np.arange(self.count + 1, self.count + n + 1, dtype=np.uint64)
            z = self.seed + k * GAMMA
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.count += n
        return (z >> np.uint64(40)).astype(np.float64) / float(1 << 24)


def features(backbone):
    if backbone == "alex":
        return torchvision.models.alexnet(weights=None).features, [1, 4, 7, 9, 11]
    return torchvision.models.vgg16(weights=None).features, [3, 8, 15, 22, 29]


def synthetic_tensors(backbone, seed):
    feats, _ = features(backbone)
    rng = SplitMix(seed)
    out = [("scaling.shift", np.array(SHIFT, np.float32)), ("scaling.scale", np.array(SCALE, np.float32))]
    for idx, layer in enumerate(feats):
        if not isinstance(layer, torch.nn.Conv2d):
            continue
        w_shape = tuple(layer.weight.shape)
        fan_in = w_shape[1] * w_shape[2] * w_shape[3]
        a = math.sqrt(6.0 / fan_in)
        w = ((2.0 * rng.units(int(np.prod(w_shape))) - 1.0) * a).astype(np.float32).reshape(w_shape)
        b = ((2.0 * rng.units(w_shape[0]) - 1.0) * BIAS_RANGE).astype(np.float32)
        out.append((f"features.{idx}.weight", w))
        out.append((f"features.{idx}.bias", b))
    for i, c in enumerate(TAPS[backbone]):
        out.append((f"lin{i}", rng.units(c).astype(np.float32).reshape(1, c, 1, 1)))
    return out


def image_pair():
    rs = np.random.RandomState(IMAGE_SEED)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    base = 0.5 + 0.25 * np.sin(xx / 3.0)[..., None] * np.cos(yy / 5.0)[..., None] * np.array([1.0, 0.6, -0.8])
    x = np.clip(base + 0.15 * rs.rand(SIZE, SIZE, 3), 0, 1)
    y = np.clip(np.roll(base, 2, axis=1) + 0.15 * rs.rand(SIZE, SIZE, 3), 0, 1)
    return (np.round(x * 255).astype(np.uint8), np.round(y * 255).astype(np.uint8))


def lpips_reference(backbone, tensors, x_u8, y_u8):
    feats, taps = features(backbone)
    named = dict(tensors)
    with torch.no_grad():
        for idx, layer in enumerate(feats):
            if isinstance(layer, torch.nn.Conv2d):
                layer.weight.copy_(torch.from_numpy(named[f"features.{idx}.weight"]))
                layer.bias.copy_(torch.from_numpy(named[f"features.{idx}.bias"]))
        feats.eval()
        shift = torch.from_numpy(named["scaling.shift"]).view(1, 3, 1, 1)
        scale = torch.from_numpy(named["scaling.scale"]).view(1, 3, 1, 1)

        def prep(img):
            t = torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
            return (2 * t - 1 - shift) / scale

        def tap_outputs(t):
            outs = []
            for i, layer in enumerate(feats):
                t = layer(t)
                if i in taps:
                    outs.append(t)
                if i == taps[-1]:
                    break
            return outs

        def normalize(f, eps=1e-10):
            return f / (torch.sqrt(torch.sum(f ** 2, dim=1, keepdim=True)) + eps)

        total = 0.0
        for k, (a, b) in enumerate(zip(tap_outputs(prep(x_u8)), tap_outputs(prep(y_u8)))):
            d = (normalize(a) - normalize(b)) ** 2
            lin = torch.from_numpy(named[f"lin{k}"])
            total = total + (d * lin).sum(dim=1, keepdim=True).mean(dim=[2, 3], keepdim=True)
        return float(total.item())


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    x, y = image_pair()
    for backbone in ("alex", "vgg"):
        tensors = synthetic_tensors(backbone, CONTAINER_SEED)
        payload = b"".join(t.astype("<f4").tobytes() for _, t in tensors)
        golden = {
            "backbone": backbone,
            "container_seed": CONTAINER_SEED,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
            "width": SIZE,
            "height": SIZE,
            "x_rgb_base64": base64.b64encode(x.tobytes()).decode(),
            "y_rgb_base64": base64.b64encode(y.tobytes()).decode(),
            "lpips": lpips_reference(backbone, tensors, x, y),
            "reference": f"torch {torch.__version__} / torchvision {torchvision.__version__}, float32",
        }
        with open(os.path.join(here, f"golden_{backbone}.json"), "w") as f:
            json.dump(golden, f, indent=2)
            f.write("\n")
        print(backbone, golden["lpips"])


if __name__ == "__main__":
    main()
