import contextlib
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterator, List, Optional, Sequence, Union

import numpy as np
from sqlalchemy.orm import Session


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def derive_seeds(seed: int, n: int) -> List[int]:
    """
    Split `seed` into `n` independent child seeds via SeedSequence spawning.
    The same (seed, n) always yields the same list, so per-dataset seeds can
    be recorded in sidecars and regenerated later.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def canonical_row_order(rows: np.ndarray) -> np.ndarray:
    """
    Index permutation sorting the rows of a 2-D array lexicographically
    (first column is the primary key). Reductions performed in this order
    are bit-identical for any permutation of the input rows.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError(f"Expected a 2-D array of rows, got shape {rows.shape}")
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(rows.T[::-1])


def canonical_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows[canonical_row_order(rows)]


def segment_offsets(lengths: Sequence[int]) -> np.ndarray:
    """Start offset of each contiguous segment, for np.ufunc.reduceat."""
    lengths = np.asarray(lengths, dtype=np.int64)
    return np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)


def stable_hash(payload: Any, length: int = 16) -> str:
    """SHA-256 of the canonical JSON encoding of `payload` (sorted keys)."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


@contextlib.contextmanager
def atomic_path(target: Union[str, Path]) -> Iterator[Path]:
    """
    Yield a temporary path next to `target`; on clean exit it is renamed
    over `target`, on error it is removed. The suffix is preserved so
    numpy writers don't append their own extension.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        dir=target.parent, prefix=f".{target.stem}.", suffix=target.suffix
    )
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            tmp_path.unlink()
        raise


def atomic_write_text(target: Union[str, Path], text: str) -> Path:
    with atomic_path(target) as tmp:
        tmp.write_text(text, encoding="utf-8")
    return Path(target)


def atomic_write_json(target: Union[str, Path], payload: Any) -> Path:
    return atomic_write_text(target, json.dumps(payload, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def get_unique_column_values(db: Session, table_class, column_names: list[str]) -> list:
    """
    Fetches unique values of one or more columns from the specified table.

    :param db: SQLAlchemy Session
    :param table_class: SQLAlchemy model class (e.g., ResultRow)
    :param column_names: List of column names as strings
    :return: List of unique values (list of scalars if one column, list of tuples if multiple)
    """
    columns = []
    for col_name in column_names:
        col = getattr(table_class, col_name, None)
        if col is None:
            raise ValueError(
                f"Column '{col_name}' does not exist in {table_class.__name__} table."
            )
        columns.append(col)

    unique_values = db.query(*columns).distinct().order_by(*columns).all()

    if len(columns) == 1:
        return [value[0] for value in unique_values]
    return unique_values


def get_column_value_by_condition(
    db: Session,
    table_class,
    filter_column: str,
    filter_value: Any,
    target_column: Optional[str] = None,
    multiple: bool = False,
) -> Union[Optional[Any], List[Any]]:
    """
    Fetches one or multiple values or full records from table_class
    where filter_column matches filter_value.

    - multiple=False, target_column=None  -> single model instance or None
    - multiple=False, target_column given -> single column value or None
    - multiple=True,  target_column=None  -> list of model instances
    - multiple=True,  target_column given -> list of column values

    Example:
        run = get_column_value_by_condition(db, Run, "config_hash", digest)
    """
    filter_col = getattr(table_class, filter_column, None)
    if filter_col is None:
        raise ValueError(f"Invalid filter column: {filter_column}")

    if target_column is not None and getattr(table_class, target_column, None) is None:
        raise ValueError(f"Invalid target column: {target_column}")

    query = db.query(table_class).filter(filter_col == filter_value).order_by(table_class.id)

    if multiple:
        records = query.all()
        if target_column is None:
            return records
        return [getattr(r, target_column) for r in records]

    record = query.first()
    if not record:
        return None
    if target_column is None:
        return record
    return getattr(record, target_column)
