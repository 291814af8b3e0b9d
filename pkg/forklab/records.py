import csv
import hashlib
import json
import os

from forklab import __version__
from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import ArtifactIOError, RecordError

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

META_KEY = "_meta"


# Stable short hash of any JSON-serializable value
def stable_hash(value, length=16):
    payload = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:length]


def make_meta(manifest_hash, seed):
    return {"manifest_hash": manifest_hash, "seed": seed, "version": __version__}


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _dumps(record):
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


# Save json file
def save_json(data, path):
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="\n") as json_file:
            json.dump(data, json_file, indent=2, sort_keys=True, ensure_ascii=False)
            json_file.write("\n")
        logger.info(f"JSON data was saved to {path}.")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise ArtifactIOError(path, str(e)) from e


# Read json file
def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as file:
            data = json.load(file)
        logger.info(f"JSON file was read successfully from {path} ")
        return data
    except FileNotFoundError as e:
        logger.error(f"File {path} not found.")
        raise ArtifactIOError(path, "file not found") from e
    except json.JSONDecodeError as e:
        logger.error(f"File {path} is not valid JSON: {e}")
        raise RecordError(path, e.lineno, e.msg) from e


# Write records as JSON lines, optionally preceded by a meta header line
def write_jsonl(records, path, meta=None, append=False):
    try:
        _ensure_parent(path)
        with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as f:
            if meta is not None:
                f.write(_dumps({META_KEY: meta}) + "\n")
            count = 0
            for record in records:
                f.write(_dumps(record) + "\n")
                count += 1
        logger.info(f"{count} records were written to {path}.")
        return count
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise ArtifactIOError(path, str(e)) from e


# Read JSON lines; the meta header (if any) is skipped
def read_jsonl(path):
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    logger.error(f"Malformed JSON in {path} at line {line_no}")
                    raise RecordError(path, line_no, f"malformed JSON ({e.msg})") from e
                if not isinstance(record, dict):
                    raise RecordError(path, line_no, "record is not an object")
                if META_KEY in record:
                    continue
                records.append(record)
    except FileNotFoundError as e:
        logger.error(f"File {path} not found.")
        raise ArtifactIOError(path, "file not found") from e
    return records


def write_csv(rows, columns, path, meta=None):
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="") as f:
            if meta is not None:
                f.write(
                    f"# manifest_hash={meta['manifest_hash']} seed={meta['seed']} version={meta['version']}\n"
                )
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row[c]) for c in columns])
        logger.info(f"CSV with {len(rows)} rows was saved to {path}.")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise ArtifactIOError(path, str(e)) from e


def read_csv(path):
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            lines = [line for line in f if not line.startswith("#")]
    except FileNotFoundError as e:
        raise ArtifactIOError(path, "file not found") from e
    return list(csv.DictReader(lines))


# Floats are written with repr
def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
