#!/usr/bin/env python3
"""Convert torchvision VGG16 convolutions into a DAWT perceptual-distance asset.

The asset holds the first N 3x3 conv layers (default 10, through conv4_3) with a
pooling flag wherever VGG has a max-pool in front of the layer. The toolkit feeds
images scaled to [-1, 1]; the ImageNet mean/std normalization is folded into
the first layer's weights and bias. Border pixels see zero padding in [-1, 1]
space rather than normalized space, and pooling is 2x2 average instead of max.

    python3 scripts/export_vgg16_features.py assets/vgg16-perceptual.dawt
    python3 scripts/export_vgg16_features.py --random /tmp/untrained.dawt
"""

import argparse
import struct

import numpy as np

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])


def vgg_layers(random_init):
    import torchvision

    weights = None if random_init else torchvision.models.VGG16_Weights.IMAGENET1K_V1
    net = torchvision.models.vgg16(weights=weights).features.eval()
    layers, pool = [], False
    for m in net:
        name = type(m).__name__
        if name == "Conv2d":
            layers.append((m.weight.detach().double().numpy(), m.bias.detach().double().numpy(), pool))
            pool = False
        elif name == "MaxPool2d":
            pool = True
    return layers


def fold_normalization(w, b):
    # x_norm = u / (2 std) + (0.5 - mean) / std for u = 2x - 1
    scale = 1.0 / (2.0 * STD)
    offset = (0.5 - MEAN) / STD
    w2 = w * scale[None, :, None, None]
    b2 = b + (w * offset[None, :, None, None]).sum(axis=(1, 2, 3))
    return w2, b2


def encode(config, tensors):
    out = bytearray(b"DAWT")
    out += struct.pack("<H", 1)
    text = "".join(f"{k} = {v}\n" for k, v in config).encode()
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--layers", type=int, default=10)
    ap.add_argument("--random", action="store_true", help="untrained weights (no download)")
    args = ap.parse_args()

    layers = vgg_layers(args.random)[: args.layers]
    tensors, flags = [], []
    for i, (w, b, pool) in enumerate(layers):
        if i == 0:
            w, b = fold_normalization(w, b)
        tensors.append((f"perceptual.{i}.weight", w))
        tensors.append((f"perceptual.{i}.bias", b))
        flags.append("1" if pool else "0")
    config = [("kind", "perceptual"), ("layers", len(layers)), ("pool_before", ",".join(flags))]
    with open(args.out, "wb") as f:
        f.write(encode(config, tensors))
    print(f"wrote {len(layers)} layers to {args.out}")


if __name__ == "__main__":
    main()
