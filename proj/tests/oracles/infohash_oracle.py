#!/usr/bin/env python3
"""Prints '<file> <INFOHASH>' for each .torrent given: SHA-1 over the raw
bytes of the top-level "info" value, located by its own bencode walker."""
import hashlib
import sys


def skip(buf, i):
    c = buf[i:i + 1]
    if c == b"i":
        return buf.index(b"e", i) + 1
    if c in (b"l", b"d"):
        i += 1
        while buf[i:i + 1] != b"e":
            i = skip(buf, i)
        return i + 1
    if c.isdigit():
        colon = buf.index(b":", i)
        return colon + 1 + int(buf[i:colon])
    raise ValueError("bad bencode at offset %d" % i)


def info_span(buf):
    if buf[:1] != b"d":
        raise ValueError("top level is not a dictionary")
    i = 1
    while buf[i:i + 1] != b"e":
        colon = buf.index(b":", i)
        klen = int(buf[i:colon])
        key = buf[colon + 1:colon + 1 + klen]
        i = colon + 1 + klen
        end = skip(buf, i)
        if key == b"info":
            return i, end
        i = end
    raise ValueError("no info key")


def infohash(path):
    with open(path, "rb") as f:
        buf = f.read()
    a, b = info_span(buf)
    return hashlib.sha1(buf[a:b]).hexdigest().upper()


def check(frozen, paths):
    want = dict(line.split() for line in open(frozen) if line.strip())
    bad = 0
    for p in paths:
        name = p.rsplit("/", 1)[-1]
        got = infohash(p)
        ok = want.get(name) == got
        bad += not ok
        print("ok  " if ok else "FAIL", name, got)
    missing = set(want) - {p.rsplit("/", 1)[-1] for p in paths}
    for name in sorted(missing):
        print("FAIL", name, "not given")
    return 1 if bad or missing else 0


if __name__ == "__main__":
    if len(sys.argv) > 2 and sys.argv[1] == "--check":
        sys.exit(check(sys.argv[2], sys.argv[3:]))
    for p in sys.argv[1:]:
        print(p.rsplit("/", 1)[-1], infohash(p))
