"""
Run manifests: the machine-readable record each CLI command leaves behind.

A manifest names the command, the fully resolved configuration, content
hashes of every input and output file, and summary values (metrics,
importance statistics). Its fingerprint hashes everything except wall-
clock timestamps, so two runs of the same configuration produce equal
fingerprints exactly when they produced identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone

from .errors import ContractViolation

MANIFEST_NAME = "manifest.json"


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


class RunManifest:
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        self.summary: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()
        self.finished: str | None = None

    def add_input(self, path: str) -> None:
        self.inputs[os.path.basename(path)] = file_sha256(path)

    def add_artifact(self, path: str) -> None:
        self.artifacts[os.path.basename(path)] = file_sha256(path)

    def fingerprint(self) -> str:
        body = {"command": self.command, "config": self.config,
                "inputs": self.inputs, "artifacts": self.artifacts,
                "summary": self.summary}
        return hashlib.sha256(_canonical(body).encode()).hexdigest()

    def write(self, out_dir: str) -> str:
        """Finish and write manifest.json; one manifest owns one directory.

        Re-running the same command into its directory replaces the
        manifest; a directory already owned by a different command is
        refused so no file ends up referenced by two manifests.
        """
        path = os.path.join(out_dir, MANIFEST_NAME)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                existing = json.load(fh)
            if existing.get("command") != self.command:
                raise ContractViolation(
                    f"{out_dir} already holds a manifest for "
                    f"{existing.get('command')!r}; refusing to mix commands")
        self.finished = datetime.now(timezone.utc).isoformat()
        body = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "started": self.started,
            "finished": self.finished,
            "fingerprint": self.fingerprint(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(body, sort_keys=True, indent=2) + "\n")
        return path


def read_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        return json.load(fh)
