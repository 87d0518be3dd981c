"""Regenerate the committed PNG fixtures.

The pairs are views of skimage's stereo motorcycle scene: two real
photographs of the same scene from slightly different positions, which
behave like two nearby video frames (mostly a piecewise-constant shift
plus occlusions). Requires scikit-image; run from this directory.
"""
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data

HERE = Path(__file__).parent


def _save(arr, name):
    Image.fromarray(arr).save(HERE / name)


def main():
    left, right, _ = data.stereo_motorcycle()
    h, w = left.shape[:2]
    size = (round(w * 512 / h), 512)
    a = np.asarray(Image.fromarray(left).resize(size, Image.Resampling.BICUBIC))
    b = np.asarray(Image.fromarray(right).resize(size, Image.Resampling.BICUBIC))
    x0 = (size[0] - 512) // 2
    a512, b512 = a[:, x0:x0 + 512], b[:, x0:x0 + 512]
    _save(a512, "frame_a_512.png")
    _save(b512, "frame_b_512.png")

    small = lambda im: np.asarray(Image.fromarray(im).resize((64, 64), Image.Resampling.BOX))
    _save(small(a512), "pair0_a_64.png")
    _save(small(b512), "pair0_b_64.png")
    for n, (y, x) in enumerate([(200, 150), (300, 320)], start=1):
        _save(a512[y:y + 64, x:x + 64], f"pair{n}_a_64.png")
        _save(b512[y:y + 64, x:x + 64], f"pair{n}_b_64.png")

    # colorization toy: 32x32 crops, downsampled 4x so colours vary across the crop
    quarter = lambda im: np.asarray(Image.fromarray(im).resize((128, 128), Image.Resampling.BOX))
    qa, qb = quarter(a512), quarter(b512)
    _save(qa[48:80, 40:72], "color_target_32.png")
    _save(qb[48:80, 40:72], "color_reference_32.png")


if __name__ == "__main__":
    main()
