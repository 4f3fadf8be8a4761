"""Writes tiny4-images.idx3-ubyte / tiny4-labels.idx1-ubyte.

Image n is filled with 40 * n, except row n which is all 255.
Labels are 7, 2, 1, 0.
"""
import struct

N, ROWS, COLS = 4, 28, 28
LABELS = [7, 2, 1, 0]

with open("tiny4-images.idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, N, ROWS, COLS))
    for n in range(N):
        for r in range(ROWS):
            f.write(bytes([255 if r == n else 40 * n] * COLS))

with open("tiny4-labels.idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x00000801, N))
    f.write(bytes(LABELS))
