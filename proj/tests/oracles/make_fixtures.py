#!/usr/bin/env python3
"""Writes the torrent fixtures under tests/fixtures. Deterministic."""
import hashlib
import os
import random
import sys

out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "fixtures")


def ben(v, sort=True):
    if isinstance(v, int):
        return b"i%de" % v
    if isinstance(v, str):
        v = v.encode()
    if isinstance(v, bytes):
        return b"%d:%s" % (len(v), v)
    if isinstance(v, list):
        return b"l" + b"".join(ben(x, sort) for x in v) + b"e"
    if isinstance(v, dict):
        items = sorted(v.items()) if sort else list(v.items())
        return b"d" + b"".join(ben(k, sort) + ben(x, sort) for k, x in items) + b"e"
    raise TypeError(type(v))


def pieces(data, plen):
    return b"".join(hashlib.sha1(data[i:i + plen]).digest() for i in range(0, len(data), plen))


def blob(seed, n):
    r = random.Random(seed)
    return bytes(r.getrandbits(8) for _ in range(n))


def write(path, data):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


t = os.path.join(out, "torrents")

data = blob(1, 40000)
write(os.path.join(t, "single.torrent"), ben({
    "announce": "udp://tracker.example:6969",
    "creation date": 1428624000,
    "info": {"length": len(data), "name": "single.bin", "piece length": 16384, "pieces": pieces(data, 16384)},
}))

files = [(["index.html"], blob(2, 3000)), (["img", "logo.png"], blob(3, 20000)), (["css", "site.css"], blob(4, 900))]
files.sort(key=lambda f: f[0])
cat = b"".join(d for _, d in files)
write(os.path.join(t, "multi.torrent"), ben({
    "announce-list": [["udp://a.example:1"], ["udp://b.example:2"]],
    "info": {
        "files": [{"length": len(d), "path": p} for p, d in files],
        "name": "site",
        "piece length": 16384,
        "pieces": pieces(cat, 16384),
    },
}))

data = blob(5, 70000)
write(os.path.join(t, "extra_keys.torrent"), ben({
    "comment": "fixture",
    "created by": "make_fixtures.py",
    "info": {"length": len(data), "name": "extra.bin", "piece length": 32768, "pieces": pieces(data, 32768),
             "private": 0, "source": "lab"},
}))

# Info keys out of order: the hash must cover the bytes as stored.
data = blob(6, 20000)
info = {"pieces": pieces(data, 16384), "name": "unsorted.bin", "piece length": 16384, "length": len(data)}
write(os.path.join(t, "noncanonical.torrent"), b"d4:info" + ben(info, sort=False) + b"e")

# The startpage pair. Its content is reconstructed; only the name is known.
sp = [(["index.html"], b"<!doctype html><title>Welcome</title><h1>Welcome to the distributed web</h1>\n"),
      (["onboarding.css"], b"body{font-family:sans-serif}\n"),
      (["images", "hero.png"], blob(7, 5000))]
sp.sort(key=lambda f: f[0])
cat = b"".join(d for _, d in sp)
name = "8E65684D700ECC41A09A60EE58991845EA56F734"
write(os.path.join(out, "startpage", name + ".torrent"), ben({
    "creation date": 1428537600,
    "info": {"files": [{"length": len(d), "path": p} for p, d in sp], "name": "startpage",
             "piece length": 16384, "pieces": pieces(cat, 16384)},
}))
write(os.path.join(out, "startpage", name + ".resume"), ben({
    "bitfield": "1",
    "created_at": 1428624061,
    "downloaded": 0,
    "info-hash": bytes.fromhex(name),
    "publisher": 0,
    "updated_at": 1428624061,
    "uploaded": 0,
}))
