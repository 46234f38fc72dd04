"""Validate a generated data directory without using the Rust code.

usage: validate_corpus.py DATA_DIR
Exits nonzero with a message on the first problem found.
"""
import json
import sys
from pathlib import Path

import jsonschema

EXAMPLE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tokens", "goldRoles", "goldClasses"],
    "properties": {
        "tokens": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "goldRoles": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "goldClasses": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "span": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "integer", "minimum": 0}},
            ]
        },
    },
}


def main(data_dir: Path) -> None:
    grammar = json.loads((data_dir / "grammar.json").read_text())
    k = grammar["params"]["n_classes"]
    l = grammar["params"]["n_roles"]
    lines = (data_dir / "embeddings.txt").read_text().splitlines()
    vocab = [ln.split(" ")[0] for ln in lines if ln.strip()]
    dims = {len(ln.split(" ")) - 1 for ln in lines if ln.strip()}
    if dims != {grammar["params"]["d_word"]}:
        sys.exit(f"embedding widths {dims}")
    if vocab != grammar["vocab"]:
        sys.exit("embedding vocabulary differs from grammar vocabulary")

    n = 0
    for i, line in enumerate((data_dir / "corpus.jsonl").read_text().splitlines(), 1):
        ex = json.loads(line)
        try:
            jsonschema.validate(ex, EXAMPLE)
        except jsonschema.ValidationError as e:
            sys.exit(f"line {i}: {e.message}")
        t, r, c = ex["tokens"], ex["goldRoles"], ex["goldClasses"]
        if not len(t) == len(r) == len(c):
            sys.exit(f"line {i}: ragged annotation")
        if max(t) >= len(vocab) or max(r) >= l or max(c) >= k:
            sys.exit(f"line {i}: index out of range")
        span = ex.get("span")
        if span is not None and not span[0] <= span[1] < len(t):
            sys.exit(f"line {i}: bad span {span}")
        n += 1
    if n == 0:
        sys.exit("empty corpus")
    print(f"ok: {n} sequences")


if __name__ == "__main__":
    main(Path(sys.argv[1]))
