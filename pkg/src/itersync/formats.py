"""On-disk formats: view-graph text files, pose files and binary checkpoints.

View-graph file (line oriented, ``#`` starts a comment)::

    SYNCGRAPH v1 <SO3|SE3> <n_nodes>
    VERTEX <id> [9 or 12 floats]      # row-major 3x3 / 3x4 groundtruth, optional
    EDGE <i> <j> <9 or 12 floats>     # row-major measured T_ij

Either every vertex carries a pose or none does.  Floats are written with 17
significant digits so a write/read cycle is exact.

Checkpoint file::

    b"ITSYNCKP"  uint32-le header length  JSON header  raw little-endian float64 arrays

The header records the format version, the group, the architecture and the
name/shape of every parameter array, in storage order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .liegroup import Group, Pose
from .network import Architecture, NetworkParams
from .viewgraph import Edge, ViewGraph, label_edges

GRAPH_MAGIC = "SYNCGRAPH"
GRAPH_VERSION = "v1"
CKPT_MAGIC = b"ITSYNCKP"
CKPT_VERSION = 1


class GraphParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class CheckpointError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _atomic_write(path: str | Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_graph(g: ViewGraph, comments: Sequence[str] = ()) -> str:
    lines = [f"{GRAPH_MAGIC} {GRAPH_VERSION} {g.group.value} {g.n}"]
    lines += [f"# {c}" for c in comments]
    for v in range(g.n):
        if g.gt_poses is None:
            lines.append(f"VERTEX {v}")
        else:
            lines.append(f"VERTEX {v} " + " ".join(_fmt(x) for x in g.gt_poses[v].matrix().ravel()))
    for e in g.edges:
        lines.append(f"EDGE {e.i} {e.j} " + " ".join(_fmt(x) for x in e.meas.matrix().ravel()))
    return "\n".join(lines) + "\n"


def write_graph(g: ViewGraph, path: str | Path, comments: Sequence[str] = ()):
    _atomic_write(path, format_graph(g, comments).encode())


def format_poses(poses: Sequence[Pose], group: Group, comments: Sequence[str] = ()) -> str:
    g = ViewGraph(len(poses), group, (), tuple(poses))
    return format_graph(g, comments)


def write_poses(poses: Sequence[Pose], group: Group, path: str | Path, comments: Sequence[str] = ()):
    _atomic_write(path, format_poses(poses, group, comments).encode())


def _floats(path, line_no, tokens, count):
    if len(tokens) != count:
        raise GraphParseError(path, line_no, f"expected {count} floats, got {len(tokens)}")
    try:
        vals = np.array([float(x) for x in tokens])
    except ValueError as exc:
        raise GraphParseError(path, line_no, str(exc)) from None
    if not np.all(np.isfinite(vals)):
        raise GraphParseError(path, line_no, "non-finite value")
    return vals


def _int(path, line_no, token):
    try:
        return int(token)
    except ValueError:
        raise GraphParseError(path, line_no, f"bad integer {token!r}") from None


def parse_graph(text: str, path="<string>", label: bool = True) -> ViewGraph:
    """Parse a view-graph file; edges are labelled when groundtruth is present."""
    group = None
    n = None
    vertices: dict[int, Pose | None] = {}
    edges: list[Edge] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if group is None:
            if tok[0] != GRAPH_MAGIC or len(tok) != 4 or tok[1] != GRAPH_VERSION:
                raise GraphParseError(path, line_no, f"expected '{GRAPH_MAGIC} {GRAPH_VERSION} <group> <n>'")
            try:
                group = Group.parse(tok[2])
            except ValueError:
                raise GraphParseError(path, line_no, f"unknown group {tok[2]!r}") from None
            n = _int(path, line_no, tok[3])
            if n < 0:
                raise GraphParseError(path, line_no, "negative node count")
            numel = 3 * group.pose_cols
            continue
        kind = tok[0]
        if kind == "VERTEX":
            if len(tok) < 2:
                raise GraphParseError(path, line_no, "VERTEX needs an id")
            v = _int(path, line_no, tok[1])
            if not 0 <= v < n:
                raise GraphParseError(path, line_no, f"vertex id {v} outside [0, {n})")
            if v in vertices:
                raise GraphParseError(path, line_no, f"duplicate vertex {v}")
            if len(tok) == 2:
                vertices[v] = None
            else:
                m = _floats(path, line_no, tok[2:], numel).reshape(3, group.pose_cols)
                vertices[v] = Pose.from_matrix(m, group)
        elif kind == "EDGE":
            if len(tok) < 3:
                raise GraphParseError(path, line_no, "EDGE needs two ids")
            i, j = _int(path, line_no, tok[1]), _int(path, line_no, tok[2])
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise GraphParseError(path, line_no, f"bad edge ({i}, {j}) for n={n}")
            m = _floats(path, line_no, tok[3:], numel).reshape(3, group.pose_cols)
            edges.append(Edge(i, j, Pose.from_matrix(m, group)))
        else:
            raise GraphParseError(path, line_no, f"unknown record {kind!r}")
    if group is None:
        raise GraphParseError(path, 0, "empty file")
    missing = set(range(n)) - set(vertices)
    if vertices and missing:
        raise GraphParseError(path, 0, f"missing vertices {sorted(missing)[:5]}")
    have = [p is not None for p in vertices.values()]
    if any(have) and not all(have):
        raise GraphParseError(path, 0, "either all or no vertices may carry poses")
    gt = tuple(vertices[v] for v in range(n)) if have and all(have) else None
    try:
        g = ViewGraph(n, group, edges, gt)
    except ValueError as exc:
        raise GraphParseError(path, 0, str(exc)) from None
    return label_edges(g) if (label and gt is not None) else g


def read_graph(path: str | Path, label: bool = True) -> ViewGraph:
    return parse_graph(Path(path).read_text(), path, label)


def read_poses(path: str | Path) -> tuple[Group, list[Pose]]:
    g = read_graph(path, label=False)
    if g.gt_poses is None:
        raise GraphParseError(path, 0, "pose file has no vertex poses")
    return g.group, list(g.gt_poses)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: NetworkParams, extra: dict | None = None) -> bytes:
    header = {
        "version": CKPT_VERSION,
        "group": params.arch.group.value,
        "arch": params.arch.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.arrays.values())
    return CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + body


def save_checkpoint(params: NetworkParams, path: str | Path, extra: dict | None = None):
    _atomic_write(path, checkpoint_bytes(params, extra))


def load_checkpoint(path: str | Path, expected_group: Group | str | None = None) -> NetworkParams:
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data, expected_group, str(path))


def checkpoint_from_bytes(data: bytes, expected_group=None, source: str = "<bytes>") -> NetworkParams:
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    off += hlen
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{source}: unsupported version {header.get('version')}")
    arch = Architecture.from_dict(header["arch"])
    if expected_group is not None and arch.group is not Group.parse(expected_group):
        raise CheckpointError(
            f"{source}: checkpoint is {arch.group.value}, expected {Group.parse(expected_group).value}"
        )
    expected = arch.param_shapes()
    names = [p["name"] for p in header["params"]]
    if names != list(expected):
        raise CheckpointError(f"{source}: parameter names {names} do not match the architecture")
    arrays = OrderedDict()
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointError(f"{source}: parameter {name} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"{source}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes")
    return NetworkParams(arch, arrays)


# ---------------------------------------------------------------------------
# reports


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_matrix_csv(path: str | Path, M: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


def write_json(path: str | Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
