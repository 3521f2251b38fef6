from __future__ import annotations

from importlib import resources
from pathlib import Path

import yaml

REQUIRED = ("summarize", "summarize_prior", "merge", "describe", "describe_details", "review",
            "keywords", "keywords_retry", "rank", "rank_preference")


class Prompts:
    """Named prompt templates loaded from YAML.

    Chat templates are mappings with ``system`` and ``user`` keys; fragments
    are plain strings spliced into them.
    """

    def __init__(self, templates: dict):
        missing = [k for k in REQUIRED if k not in templates]
        if missing:
            raise ValueError(f"prompts file lacks template(s): {', '.join(missing)}")
        self.templates = templates
        self.version = templates.get("version", 0)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Prompts":
        if path is None:
            text = resources.files("cotrec").joinpath("prompts.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(yaml.safe_load(text))

    def chat(self, name: str, **values) -> tuple[str, str]:
        t = self.templates[name]
        return t["system"].strip(), t["user"].format(**values)

    def fragment(self, name: str, **values) -> str:
        return self.templates[name].format(**values).rstrip("\n") + "\n"
