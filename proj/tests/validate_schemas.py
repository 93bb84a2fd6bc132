"""Validate a run directory's manifest and calibration tables, and check
that every file listed in the manifest hashes to its recorded FNV-1a."""

import json
import pathlib
import sys

import jsonschema


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def main() -> int:
    schemas, run = pathlib.Path(sys.argv[1]), pathlib.Path(sys.argv[2])
    manifest_schema = json.loads((schemas / "manifest.schema.json").read_text())
    calibration_schema = json.loads((schemas / "calibration.schema.json").read_text())

    manifest = json.loads((run / "manifest.json").read_text())
    jsonschema.validate(manifest, manifest_schema)
    for entry in manifest["files"]:
        body = (run / entry["path"]).read_bytes()
        if fnv1a64(body) != entry["fnv1a64"]:
            print(f"hash mismatch: {entry['path']}")
            return 1

    tables = sorted((run / "calibration").glob("*.json"))
    if not tables:
        print("no calibration tables")
        return 1
    for path in tables:
        jsonschema.validate(json.loads(path.read_text()), calibration_schema)
    print(f"ok: manifest + {len(tables)} calibration tables")
    return 0


if __name__ == "__main__":
    sys.exit(main())
