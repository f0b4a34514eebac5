import concurrent.futures
import csv
import hashlib
import json
import os
from pathlib import Path
from string import ascii_letters, digits
from typing import Any, Callable, Dict, List, Mapping, Sequence

import numpy as np
from nanoid import generate as nanoid_gen

from .constant import NANOID_LENGTH, PPM_MAXVAL, THREADS_ENV, MULTI_THREAD_COUNT
from .errors import Corrupt
from .logs import logger


def is_valid_string(i):
    return i is not None and isinstance(i, str) and len(i) != 0


def new_run_id() -> str:
    return nanoid_gen(size=NANOID_LENGTH, alphabet=ascii_letters + digits + "_")


def default_thread_count() -> int:
    value = os.environ.get(THREADS_ENV)
    if is_valid_string(value) and value.isdigit() and int(value) >= 1:
        return int(value)
    return MULTI_THREAD_COUNT


def multi_thread(func: Callable, data: Sequence, arg_name_of_data: str, thread_cnt: int, **kwargs) -> List[Any]:
    """
    Run `func` over `data` on a bounded thread pool.
    Results come back in input order, one slot per item, so reductions over them are deterministic.
    """
    if thread_cnt <= 1 or len(data) <= 1:
        return [func(**{arg_name_of_data: item}, **kwargs) for item in data]

    with concurrent.futures.ThreadPoolExecutor(max_workers=min(thread_cnt, len(data))) as executor:
        futures = [
            executor.submit(func, **{arg_name_of_data: item}, **kwargs)
            for item in data
        ]
        return [future.result() for future in futures]


def array_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-1 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha1()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def json_digest(obj: Any) -> str:
    msg = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(msg.encode()).hexdigest()


def save_sidecar(path: str | Path, content: Dict[str, Any]):
    """Write a JSON metadata file next to a main output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(content, f, indent=2, sort_keys=True)
    logger.debug(f"Saved sidecar {path.name}")


def write_ppm(path: str | Path, pixels: np.ndarray):
    """Write an (H, W, 3) uint8 array as binary PPM (P6)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n{PPM_MAXVAL}\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()

    # Header is four whitespace separated tokens: magic, width, height, maxval
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise Corrupt(f"truncated PPM header in {path}")
        tokens.append(raw[start:pos])
    pos += 1

    if tokens[0] != b"P6" or int(tokens[3]) != PPM_MAXVAL:
        raise Corrupt(f"{path} is not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise Corrupt(f"truncated PPM body in {path}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[Any]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


class CsvLog:
    """Append-only CSV progress log; the header is written on open."""

    def __init__(self, path: str | Path | None, header: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.header = list(header)
        if self.path is not None:
            write_csv(self.path, self.header, [])

    def append(self, row: Sequence[Any]):
        if self.path is None:
            return
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)
