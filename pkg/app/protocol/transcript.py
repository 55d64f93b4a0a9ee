import json
import logging
import threading
from collections import Counter
from pathlib import Path

from app.protocol.messages import MESSAGE_TYPES, decode

logger = logging.getLogger(__name__)


class Transcript:
    """
    Records every frame a transport sends, receives or publishes. With a path,
    each frame is also appended as a JSON line {"direction", "peer", "frame"(hex)}.
    """

    def __init__(self, path=None):
        self.frames = []
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, direction, peer, frame):
        with self._lock:
            self.frames.append((direction, peer, bytes(frame)))
            if self.path:
                with self.path.open("a") as f:
                    f.write(json.dumps({"direction": direction, "peer": peer, "frame": bytes(frame).hex()}) + "\n")

    def messages(self):
        return [decode(frame) for _, _, frame in self.frames]

    def tag_counts(self):
        return Counter(msg.tag for msg in self.messages())


def load_transcript(path):
    frames = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            frames.append((entry["direction"], entry["peer"], bytes.fromhex(entry["frame"])))
    return frames


def _floats(value):
    if isinstance(value, bool):
        return
    if isinstance(value, float):
        yield value
    elif isinstance(value, dict):
        for v in value.values():
            yield from _floats(v)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _floats(v)


def _has_point_arrays(value):
    """True for any list of numeric lists, the shape raw samples would take."""
    if isinstance(value, dict):
        return any(_has_point_arrays(v) for v in value.values())
    if isinstance(value, list):
        if any(isinstance(v, list) and v and all(isinstance(x, (int, float)) for x in v) for v in value):
            return True
        return any(_has_point_arrays(v) for v in value)
    return False


def sample_coordinates(clients):
    coords = set()
    for c in clients:
        coords.update(float(x) for x in c.xs.points.ravel())
        coords.update(float(x) for x in c.ys.points.ravel())
    return coords


def audit_frames(frames, coordinates=None):
    """
    Privacy audit. Every frame must decode to a known message whose fields are
    exactly its schema's fields and which holds no nested point arrays; when
    `coordinates` is given, no float anywhere in a frame may equal one of them.
    Returns a list of findings; empty means clean.
    """
    findings = []
    for index, entry in enumerate(frames):
        frame = entry[2] if isinstance(entry, tuple) else entry
        try:
            msg = decode(frame)
        except Exception as e:
            findings.append(f"frame {index}: undecodable ({e})")
            continue
        data = msg.model_dump()
        allowed = set(MESSAGE_TYPES[msg.tag].model_fields)
        extra = set(data) - allowed
        if extra:
            findings.append(f"frame {index} ({msg.tag}): unexpected fields {sorted(extra)}")
        if _has_point_arrays(data):
            findings.append(f"frame {index} ({msg.tag}): contains point arrays")
        if coordinates:
            leaked = [x for x in _floats(data) if x in coordinates]
            if leaked:
                findings.append(f"frame {index} ({msg.tag}): {len(leaked)} values equal sample coordinates")
    if findings:
        logger.warning("Transcript audit found %d problems", len(findings))
    return findings
