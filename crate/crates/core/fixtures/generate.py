"""Regenerates the ingestion fixtures and their expected tensors.

Pure Python, no third-party packages. Images are resized with half-pixel
bilinear interpolation (source coordinate (d + 0.5) * in / out - 0.5,
clamped to the grid, each blend written as a + (b - a) * t), masks with
nearest neighbour (source index floor((2d + 1) * in / (2 * out))), image
bytes map to v / 127.5 - 1 rounded to f32, and mask bytes above 127 map
to 1.

Run from this directory: python3 generate.py
"""

import math
import os
import struct

TARGET = 32


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def write_pnm(path, magic, w, h, data, comment=None):
    header = magic + "\n"
    if comment:
        header += "# " + comment + "\n"
    header += "%d %d\n255\n" % (w, h)
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + bytes(data))


def taps(d, n_in, n_out):
    s = (d + 0.5) * (n_in / n_out) - 0.5
    s = min(max(s, 0.0), float(n_in - 1))
    i0 = math.floor(s)
    i1 = min(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def lerp(a, b, t):
    return a + (b - a) * t


def bilinear(px, w, h, c, ow, oh):
    out = []
    for y in range(oh):
        y0, y1, ty = taps(y, h, oh)
        for x in range(ow):
            x0, x1, tx = taps(x, w, ow)
            for ch in range(c):
                p = lambda yy, xx: float(px[(yy * w + xx) * c + ch])
                top = lerp(p(y0, x0), p(y0, x1), tx)
                bot = lerp(p(y1, x0), p(y1, x1), tx)
                out.append(lerp(top, bot, ty))
    return out


def nearest(px, w, h, ow, oh):
    out = []
    for y in range(oh):
        sy = min((2 * y + 1) * h // (2 * oh), h - 1)
        for x in range(ow):
            sx = min((2 * x + 1) * w // (2 * ow), w - 1)
            out.append(px[sy * w + sx])
    return out


def dump(path, shape, values):
    with open(path, "w") as f:
        f.write(" ".join(str(d) for d in shape) + "\n")
        for v in values:
            f.write("%.8e\n" % v)


def image_bytes(w, h, salt):
    return [((x * 37 + y * 91 + c * 53 + salt * x * y) % 256) for y in range(h) for x in range(w) for c in range(3)]


def mask_bytes(w, h):
    levels = [0, 100, 127, 128, 200, 255]
    out = []
    for y in range(h):
        for x in range(w):
            inside = (x - w / 2) ** 2 / (w / 3) ** 2 + (y - h / 2) ** 2 / (h / 3) ** 2 < 1
            out.append(255 if inside else levels[(x + 2 * y) % len(levels)])
    return out


def main():
    for d in ("images", "masks", "golden"):
        os.makedirs(d, exist_ok=True)
    specs = [("fx_down", 40, 24, 3), ("fx_up", 20, 12, 7)]
    for name, w, h, salt in specs:
        img = image_bytes(w, h, salt)
        msk = mask_bytes(w, h)
        write_pnm("images/%s.ppm" % name, "P6", w, h, img, comment="fixture " + name)
        write_pnm("masks/%s.pgm" % name, "P5", w, h, msk)
        vals = [f32(v / 127.5 - 1.0) for v in bilinear(img, w, h, 3, TARGET, TARGET)]
        dump("golden/%s.image.txt" % name, [TARGET, TARGET, 3], vals)
        m = [1.0 if v > 127 else 0.0 for v in nearest(msk, w, h, TARGET, TARGET)]
        dump("golden/%s.mask.txt" % name, [TARGET, TARGET, 1], m)
    # A 2×2 colour grid for exact decoding.
    write_pnm("tiny.ppm", "P6", 2, 2, [0, 1, 2, 64, 65, 66, 128, 129, 130, 253, 254, 255])


if __name__ == "__main__":
    main()
