#!/usr/bin/env python3
"""Regenerate resources/corpus/MANIFEST.sha256.

One line per string leaf of every corpus file: "<sha256>  <file>:<json-pointer>".
The C++ test suite recomputes these digests from the embedded corpus.
"""

import hashlib
import json
import pathlib
import sys

FILES = ["full.json", "mini.json", "controls.json"]


def leaves(node, pointer):
    if isinstance(node, dict):
        for k in sorted(node):
            yield from leaves(node[k], pointer + "/" + k.replace("~", "~0").replace("/", "~1"))
    elif isinstance(node, list):
        for i, v in enumerate(node):
            yield from leaves(v, f"{pointer}/{i}")
    elif isinstance(node, str):
        yield pointer, node


def main():
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "resources/corpus")
    lines = []
    for name in FILES:
        doc = json.loads((root / name).read_text(encoding="utf-8"))
        for pointer, text in leaves(doc, ""):
            digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
            lines.append(f"{digest}  {name}:{pointer}")
    (root / "MANIFEST.sha256").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(lines)} entries")


if __name__ == "__main__":
    main()
