"""
Tensor Data Module
COO text ingestion and export, query files, train/validation/test
splitting, and split manifests.

COO text format::

    # shape: I1,I2,...,IN        (optional header)
    # any other '#' line is a comment
    i1,i2,...,iN,value           (comma or tab separated)
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

import numpy as np

from .errors import TensorDataError, DuplicateIndexError
from .models import SparseTensor, DatasetSplit


logger = logging.getLogger(__name__)

AGGREGATE_MODES = ('mean', 'sum')

_DELIMITER = re.compile(r'[,\t]')
_SHAPE_HEADER = re.compile(r'^#\s*shape\s*:\s*(.+)$', re.IGNORECASE)


def _split_fields(line: str) -> list[str]:
    return [part.strip() for part in _DELIMITER.split(line)]


def _parse_shape_header(body: str, line_number: int) -> tuple[int, ...]:
    try:
        shape = tuple(int(part) for part in _split_fields(body) if part)
    except ValueError:
        raise TensorDataError(f"Malformed shape header: {body!r}", line_number)
    if not shape or any(d < 1 for d in shape):
        raise TensorDataError(f"Shape header must list positive integers: {body!r}", line_number)
    return shape


def parse_coo(
    text_source: Union[str, Iterable[str]],
    n_modes: int,
    aggregate: Optional[str] = None,
    one_based: bool = False
) -> SparseTensor:
    """
    Parse a COO text stream into a SparseTensor.

    Args:
        text_source: Whole text, or an iterable of lines (an open file works).
        n_modes: Number of index columns per data line.
        aggregate: None to reject duplicate indices, or 'mean' / 'sum' to merge them.
        one_based: Shift every index down by one on ingest.

    Returns:
        The parsed tensor. Without a shape header the shape is the per-mode
        maximum index + 1.

    Raises:
        TensorDataError: Malformed line, non-finite value, or bad header.
        DuplicateIndexError: Repeated index tuple with ``aggregate=None``.
    """
    if n_modes < 1:
        raise TensorDataError(f"n_modes must be >= 1, got {n_modes}")
    if aggregate is not None and aggregate not in AGGREGATE_MODES:
        raise TensorDataError(f"aggregate must be one of {AGGREGATE_MODES}, got {aggregate!r}")
    if isinstance(text_source, str):
        text_source = text_source.splitlines()

    shape: Optional[tuple[int, ...]] = None
    sums: dict[tuple[int, ...], float] = {}
    counts: dict[tuple[int, ...], int] = {}
    offset = 1 if one_based else 0

    for line_number, raw in enumerate(text_source, 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith('#'):
            header = _SHAPE_HEADER.match(line)
            if header:
                if sums:
                    raise TensorDataError("Shape header must precede data lines", line_number)
                shape = _parse_shape_header(header.group(1), line_number)
                if len(shape) != n_modes:
                    raise TensorDataError(
                        f"Shape header declares {len(shape)} modes, expected {n_modes}", line_number
                    )
            continue

        fields = _split_fields(line)
        if len(fields) != n_modes + 1:
            raise TensorDataError(
                f"Expected {n_modes} indices and one value, got {len(fields)} fields", line_number
            )
        try:
            index = tuple(int(f) - offset for f in fields[:n_modes])
            value = float(fields[n_modes])
        except ValueError:
            raise TensorDataError(f"Malformed line: {line!r}", line_number)
        if not math.isfinite(value):
            raise TensorDataError(f"Non-finite value {fields[n_modes]!r}", line_number)
        if any(i < 0 for i in index):
            raise TensorDataError(f"Negative index {index}", line_number)
        if shape is not None and any(i >= d for i, d in zip(index, shape)):
            raise TensorDataError(f"Index {index} outside declared shape {list(shape)}", line_number)

        if index in sums:
            if aggregate is None:
                raise DuplicateIndexError(f"Duplicate index {index}", line_number)
            sums[index] += value
            counts[index] += 1
        else:
            sums[index] = value
            counts[index] = 1

    if not sums:
        if shape is None:
            raise TensorDataError("No entries and no shape header; cannot infer shape")
        return SparseTensor(shape, np.zeros((0, n_modes), dtype=np.int64), np.zeros(0))

    indices = np.array(list(sums.keys()), dtype=np.int64)
    values = np.array(list(sums.values()), dtype=np.float64)
    if aggregate == 'mean':
        values = values / np.array(list(counts.values()), dtype=np.float64)
    if shape is None:
        shape = tuple(int(m) + 1 for m in indices.max(axis=0))
    return SparseTensor(shape, indices, values)


def read_coo(
    path: Union[str, Path],
    n_modes: int,
    aggregate: Optional[str] = None,
    one_based: bool = False
) -> SparseTensor:
    """Parse a COO text file. See parse_coo."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            tensor = parse_coo(f, n_modes, aggregate=aggregate, one_based=one_based)
    except OSError as e:
        raise TensorDataError(f"Cannot read {path}: {e}") from e
    logger.info("Read %d entries of a %s tensor from %s", tensor.nnz, 'x'.join(map(str, tensor.shape)), path)
    return tensor


def _scan_header(path: Union[str, Path]) -> tuple[int, Optional[tuple[int, ...]]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_number, raw in enumerate(f, 1):
                line = raw.strip()
                if not line:
                    continue
                header = _SHAPE_HEADER.match(line)
                if header:
                    shape = _parse_shape_header(header.group(1), line_number)
                    return len(shape), shape
                if line.startswith('#'):
                    continue
                return len(_split_fields(line)) - 1, None
    except OSError as e:
        raise TensorDataError(f"Cannot read {path}: {e}") from e
    raise TensorDataError(f"{path} holds no header and no data lines")


def infer_n_modes(path: Union[str, Path]) -> int:
    """Number of index columns of a COO file, from its header or first data line."""
    return _scan_header(path)[0]


def declared_shape(path: Union[str, Path]) -> Optional[tuple[int, ...]]:
    """Shape from the ``# shape:`` header, or None when the file has none."""
    return _scan_header(path)[1]


def parse_queries(
    text_source: Union[str, Iterable[str]],
    shape: tuple[int, ...],
    one_based: bool = False
) -> tuple[np.ndarray, list[TensorDataError]]:
    """
    Parse query index tuples, one per line, keeping input order.

    A trailing value column (as in a COO file) is accepted and ignored. Bad
    lines do not stop parsing; each yields a TensorDataError naming its line.

    Returns:
        ((Q, N) indices of the valid lines, errors of the invalid ones)
    """
    if isinstance(text_source, str):
        text_source = text_source.splitlines()
    n_modes = len(shape)
    offset = 1 if one_based else 0
    rows: list[tuple[int, ...]] = []
    errors: list[TensorDataError] = []

    for line_number, raw in enumerate(text_source, 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        fields = _split_fields(line)
        if len(fields) not in (n_modes, n_modes + 1):
            errors.append(TensorDataError(f"Expected {n_modes} indices, got {len(fields)} fields", line_number))
            continue
        try:
            index = tuple(int(f) - offset for f in fields[:n_modes])
        except ValueError:
            errors.append(TensorDataError(f"Malformed index: {line!r}", line_number))
            continue
        if any(i < 0 or i >= d for i, d in zip(index, shape)):
            errors.append(TensorDataError(
                f"Index {tuple(i + offset for i in index)} outside shape {list(shape)}", line_number
            ))
            continue
        rows.append(index)

    indices = np.array(rows, dtype=np.int64).reshape(-1, n_modes)
    return indices, errors


def read_queries(
    path: Union[str, Path],
    shape: tuple[int, ...],
    one_based: bool = False
) -> tuple[np.ndarray, list[TensorDataError]]:
    """Parse a query file. See parse_queries."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return parse_queries(f, shape, one_based)
    except OSError as e:
        raise TensorDataError(f"Cannot read {path}: {e}") from e


def write_coo(tensor: SparseTensor, stream: TextIO) -> None:
    """Write ``tensor`` as comma-separated COO text with a shape header."""
    stream.write(f"# shape: {','.join(str(d) for d in tensor.shape)}\n")
    for index, value in zip(tensor.indices, tensor.values):
        stream.write(','.join(str(int(i)) for i in index))
        stream.write(f",{float(value)!r}\n")


def save_coo(tensor: SparseTensor, path: Union[str, Path]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        write_coo(tensor, f)


def split_dataset(
    tensor: SparseTensor,
    train_frac: float,
    val_frac_of_train: float,
    seed: int
) -> DatasetSplit:
    """
    Randomly partition the entries of ``tensor`` into train/val/test.

    The test partition holds round((1 - train_frac) * nnz) entries; the
    validation partition is drawn from the remaining training portion. The
    permutation depends on ``seed`` only.

    Raises:
        TensorDataError: Fewer than 3 entries or fractions out of range.
    """
    if not 0 < train_frac < 1:
        raise TensorDataError(f"train_frac must lie in (0, 1), got {train_frac}")
    if not 0 <= val_frac_of_train < 1:
        raise TensorDataError(f"val_frac_of_train must lie in [0, 1), got {val_frac_of_train}")
    n = tensor.nnz
    if n < 3:
        raise TensorDataError(f"Need at least 3 entries to split, got {n}")

    n_test = min(int(round((1 - train_frac) * n)), n - 1)
    n_val = int(round(val_frac_of_train * (n - n_test)))
    n_val = min(n_val, n - n_test - 1)

    perm = np.random.default_rng(seed).permutation(n)
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test:n_test + n_val])
    train = np.sort(perm[n_test + n_val:])
    return DatasetSplit(train=train, val=val, test=test, seed=seed)


def save_split(split: DatasetSplit, path: Union[str, Path]) -> None:
    """Persist a split manifest as JSON (``train``, ``val``, ``test``, ``seed``)."""
    Path(path).write_text(json.dumps(split.to_dict()), encoding='utf-8')


def load_split(path: Union[str, Path], nnz: Optional[int] = None) -> DatasetSplit:
    """
    Load a split manifest, optionally checking it against a tensor size.

    Raises:
        TensorDataError: Unreadable or malformed manifest.
    """
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
        split = DatasetSplit(
            train=np.array(data['train'], dtype=np.int64),
            val=np.array(data['val'], dtype=np.int64),
            test=np.array(data['test'], dtype=np.int64),
            seed=int(data['seed']),
        )
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise TensorDataError(f"Invalid split manifest {path}: {e}") from e
    if nnz is not None:
        split.validate(nnz)
    return split
