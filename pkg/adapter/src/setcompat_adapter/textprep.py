"""Description tokenization, kept rule-identical to the engine's.

The rule: lowercase, then split on runs of anything outside [a-z0-9].
Keeping this in lockstep matters because vocabularies built on either
side must agree token for token.
"""

from __future__ import annotations

import json
import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize_manifest(in_path, out_path) -> int:
    """Rewrite a manifest so every description is a token list.

    Lines without descriptions pass through unchanged. Returns the
    number of outfits written.
    """
    count = 0
    with open(in_path, "r", encoding="utf-8") as src, open(
        out_path, "w", encoding="utf-8"
    ) as dst:
        for lineno, line in enumerate(src, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{in_path}:{lineno}: invalid JSON: {e}") from None
            descriptions = obj.get("descriptions")
            if descriptions is not None:
                obj["descriptions"] = [
                    d if isinstance(d, list) else tokenize(d) for d in descriptions
                ]
            dst.write(json.dumps(obj, sort_keys=True) + "\n")
            count += 1
    return count
