#!/usr/bin/env python3
"""Writes tiny100.idx (100 labelled 8x8 images) and tiny100.expected."""
import random
import struct

random.seed(20240601)
n, h, w = 100, 8, 8
labels = [i % 4 for i in range(n)]
random.shuffle(labels)
pixels = [random.randrange(256) for _ in range(n * h * w)]

with open("tiny100.idx", "wb") as f:
    f.write(struct.pack(">I", 0x00000D03))
    f.write(struct.pack(">III", n, h, w))
    f.write(bytes(labels))
    f.write(bytes(pixels))

with open("tiny100.expected", "w") as f:
    f.write(f"samples {n}\n")
    f.write(f"label_sum {sum(labels)}\n")
    f.write(f"pixel_byte_sum {sum(pixels)}\n")
    f.write(f"first_label {labels[0]}\n")
    f.write(f"first_pixel_byte {pixels[0]}\n")
    f.write(f"last_pixel_byte {pixels[-1]}\n")
