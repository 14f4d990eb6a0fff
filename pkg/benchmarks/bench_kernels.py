"""Compare the compiled and numpy resampling kernels on a 224x224x3 image.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from cxr_ef import kernels


def cases(image):
    h, w = image.shape[:2]
    rot = kernels.rotation_matrix(image.shape, 7.5)
    crop = kernels.resize_matrix(image.shape, (h, w), box=(20.0, 12.0, 190.0, 200.0))
    return {
        "rotate 7.5 deg": lambda b: kernels.warp_affine(image, (h, w), rot, backend=b),
        "crop + resize": lambda b: kernels.warp_affine(image, (h, w), crop, clamp=True, backend=b),
        "resize to 512": lambda b: kernels.resize_bilinear(image, (512, 512), backend=b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    image = np.random.default_rng(0).random((224, 224, 3))
    backends = ["python"]
    try:
        from cxr_ef import _kernels_c  # noqa: F401
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"import-time backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(image).items():
        if len(backends) == 2:
            np.testing.assert_array_equal(fn("cython"), fn("python"))
        ms = [1e3 * min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends]
        speedup = f"{ms[1] / ms[0]:>9.1f}x" if len(ms) == 2 else ""
        print(f"{name:<16}" + "".join(f"{m:>12.3f}" for m in ms) + speedup)


if __name__ == "__main__":
    main()
