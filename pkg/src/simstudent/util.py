"""Shared helpers: seed mixing, named RNG streams, worker counts, allocator
tuning, flood fill."""

import ctypes
import ctypes.util
import glob
import hashlib
import os
import sysconfig

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer (deterministic 64-bit mixing)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _key_to_int(key) -> int:
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(key) & _MASK64


def mix_seed(master_seed: int, *keys) -> int:
    """Derive a child seed from a master seed and a sequence of int/str keys.

    Used so per-slide, per-epoch, and per-purpose random streams are
    independent of one another and of the order in which optional pipeline
    stages run.
    """
    x = master_seed & _MASK64
    for key in keys:
        x = splitmix64(x ^ _key_to_int(key))
    return x


def stream(master_seed: int, *keys) -> np.random.Generator:
    """A named, reproducible random stream derived from (master_seed, keys)."""
    return np.random.default_rng(mix_seed(master_seed, *keys))


def worker_count() -> int:
    """Worker parallelism cap from SIMSTUDENT_THREADS (0 or unset = auto)."""
    raw = os.environ.get("SIMSTUDENT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


_TUNED = False


def tune_performance() -> None:
    """One-time process tuning for the training hot loops.

    Keeps glibc from handing large numpy buffers back to the kernel on every
    free (mmap/munmap churn dominates the conv layers otherwise), and applies
    the SIMSTUDENT_THREADS cap to the BLAS thread pool, whose spin-waiting
    workers otherwise starve the single-threaded numpy code between GEMMs.
    Both steps are best-effort; failures are ignored.
    """
    global _TUNED
    if _TUNED:
        return
    _TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-4, 0)            # M_MMAP_MAX = 0
        libc.mallopt(-1, 2**31 - 1)    # M_TRIM_THRESHOLD = never
    except Exception:
        pass
    if os.environ.get("SIMSTUDENT_THREADS"):
        _set_blas_threads(worker_count())


def _set_blas_threads(n: int) -> None:
    site = sysconfig.get_paths()["purelib"]
    for pattern in ("numpy.libs/*openblas*", "numpy/.libs/*openblas*"):
        for path in glob.glob(os.path.join(site, pattern)):
            try:
                lib = ctypes.CDLL(path)
            except OSError:
                continue
            for symbol in ("scipy_openblas_set_num_threads64_",
                           "openblas_set_num_threads64_",
                           "openblas_set_num_threads"):
                fn = getattr(lib, symbol, None)
                if fn is not None:
                    fn(n)
                    return


def connected_components(cells) -> list:
    """8-connected components of a set of (row, col) cells.

    Returns a list of sets, ordered by each component's minimum cell so the
    output is deterministic.
    """
    remaining = set(cells)
    components = []
    while remaining:
        seed_cell = min(remaining)
        stack = [seed_cell]
        remaining.discard(seed_cell)
        comp = {seed_cell}
        while stack:
            r, c = stack.pop()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    nb = (r + dr, c + dc)
                    if nb in remaining:
                        remaining.discard(nb)
                        comp.add(nb)
                        stack.append(nb)
        components.append(comp)
    components.sort(key=min)
    return components
