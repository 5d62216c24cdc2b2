# Writes golden.h2ar with struct.pack, independent of the Rust writer.
import struct

rows = [
    [0.0, -1.5, 2.25, 1024.0],
    [0.1, -0.0, 3.0e-5, -7.0],
    [65504.0, 1.0 / 3.0, -2.0, 0.5],
]
with open("golden.h2ar", "wb") as f:
    f.write(b"H2AR")
    f.write(struct.pack("<III", 1, len(rows), len(rows[0])))
    for r in rows:
        f.write(struct.pack("<4f", *r))
