"""Writes the IDX fixtures used by the loader tests.

Pixel rule for the good pair: value(i, r, c) = (i*97 + r*31 + c*7) % 256,
with the first pixel of image 0 forced to 255. Labels are 7 and 2.
"""
import gzip
import pathlib
import struct

HERE = pathlib.Path(__file__).parent
N, ROWS, COLS = 2, 4, 3


def pixels():
    out = bytearray()
    for i in range(N):
        for r in range(ROWS):
            for c in range(COLS):
                out.append((i * 97 + r * 31 + c * 7) % 256)
    out[0] = 255
    return bytes(out)


def images(magic=0x803, count=N, payload=None):
    body = pixels() if payload is None else payload
    return struct.pack(">IIII", magic, count, ROWS, COLS) + body


def labels(magic=0x801, values=(7, 2), count=None):
    count = len(values) if count is None else count
    return struct.pack(">II", magic, count) + bytes(values)


FILES = {
    "good-images.idx": images(),
    "good-labels.idx": labels(),
    "labels-wrong-magic.idx": labels(magic=0x803),
    "images-wrong-magic.idx": images(magic=0x801),
    "images-truncated.idx": images()[:-5],
    "images-short-header.idx": images()[:10],
    "images-trailing.idx": images() + b"\x00\x01",
    "labels-truncated.idx": labels(count=3),
    "labels-three.idx": labels(values=(1, 2, 3)),
    "labels-out-of-range.idx": labels(values=(7, 10)),
    "empty.idx": b"",
}


def main():
    for name, data in FILES.items():
        (HERE / name).write_bytes(data)
    for stem in ("good-images", "good-labels"):
        (HERE / f"{stem}.idx.gz").write_bytes(gzip.compress(FILES[f"{stem}.idx"], mtime=0))
    (HERE / "truncated.idx.gz").write_bytes(gzip.compress(FILES["good-images.idx"], mtime=0)[:-12])


if __name__ == "__main__":
    main()
