"""
Dataset Module
Loads, generates, standardizes and splits tabular classification data
with optional sensitive-group labels
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder, StandardScaler

from utils.errors import DataError, InvalidArgumentError

logger = logging.getLogger(__name__)

TOY_MIN_SIZE = 10
TOY_MAJORITY_PROB = 0.9

# (group, label) -> (mean, variance) of (X1, X2)
TOY_COMPONENTS = {
    (1, 1): ([6.0, 0.0], 1.0),
    (1, 0): ([2.0, 0.0], 1.0),
    (0, 1): ([-4.0, 2.0], 2.5),
    (0, 0): ([-2.0, 0.0], 2.5),
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Standardization:
    """Per-column z-score transform fitted on a reference sample"""
    mean: np.ndarray
    scale: np.ndarray
    constant_columns: Tuple[int, ...] = ()

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardization":
        # StandardScaler uses the population variance and gives zero-variance columns unit scale
        scaler = StandardScaler().fit(features)
        constant = tuple(int(j) for j in np.flatnonzero(scaler.var_ == 0.0))
        return cls(mean=_frozen(scaler.mean_), scale=_frozen(scaler.scale_), constant_columns=constant)

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape[-1] != self.mean.shape[0]:
            raise InvalidArgumentError(
                f"Standardization fitted on {self.mean.shape[0]} columns, got {features.shape[-1]}"
            )
        out = (features - self.mean) / self.scale
        if self.constant_columns:
            out[..., list(self.constant_columns)] = 0.0
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "constant_columns": list(self.constant_columns),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Standardization":
        return cls(
            mean=_frozen(np.asarray(data["mean"], dtype=float)),
            scale=_frozen(np.asarray(data["scale"], dtype=float)),
            constant_columns=tuple(data.get("constant_columns", [])),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix, labels and optional sensitive-group ids"""
    features: np.ndarray
    labels: np.ndarray
    sensitive: Optional[np.ndarray] = None
    feature_names: Tuple[str, ...] = ()
    label_names: Tuple[str, ...] = ()
    group_names: Tuple[str, ...] = ()
    standardization: Optional[Standardization] = None
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2 or features.shape[0] < 1:
            raise InvalidArgumentError(f"Features must be a non-empty N x d matrix, got shape {features.shape}")
        n, d = features.shape
        labels = np.asarray(self.labels)
        if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
            raise InvalidArgumentError("Labels must be a length-N integer vector")
        label_names = tuple(self.label_names) or tuple(str(k) for k in range(int(labels.max()) + 1))
        if labels.min() < 0 or labels.max() >= len(label_names):
            raise InvalidArgumentError(f"Labels must lie in [0, {len(label_names) - 1}]")
        feature_names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(d))
        if len(feature_names) != d:
            raise InvalidArgumentError(f"Got {len(feature_names)} feature names for {d} columns")

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))
        object.__setattr__(self, "feature_names", feature_names)
        object.__setattr__(self, "label_names", label_names)

        if self.sensitive is not None:
            sensitive = np.asarray(self.sensitive)
            if sensitive.shape != (n,) or not np.issubdtype(sensitive.dtype, np.integer):
                raise InvalidArgumentError("Sensitive ids must be a length-N integer vector")
            group_names = tuple(self.group_names) or tuple(str(g) for g in range(int(sensitive.max()) + 1))
            if sensitive.min() < 0 or sensitive.max() >= len(group_names):
                raise InvalidArgumentError("Sensitive id outside the known group ids")
            object.__setattr__(self, "sensitive", _frozen(sensitive.astype(np.int64)))
            object.__setattr__(self, "group_names", group_names)

        indices = np.arange(n) if self.indices is None else np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", _frozen(indices))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def has_sensitive(self) -> bool:
        return self.sensitive is not None

    def subset(self, rows: Sequence[int]) -> "Dataset":
        """Rows selected by position, keeping names and group ids"""
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            sensitive=None if self.sensitive is None else self.sensitive[rows],
            indices=self.indices[rows],
        )

    def without_sensitive(self) -> "Dataset":
        return replace(self, sensitive=None, group_names=())

    def with_sensitive(self, sensitive: np.ndarray, group_names: Sequence[str] = ()) -> "Dataset":
        return replace(self, sensitive=np.asarray(sensitive), group_names=tuple(group_names))

    def to_frame(self, label_column: str = "y",
                 sensitive_column: Union[str, Sequence[str]] = "s") -> pd.DataFrame:
        """Tabular view; intersectional group names are split back over their columns"""
        frame = pd.DataFrame(self.features, columns=list(self.feature_names))
        if self.sensitive is not None:
            columns = [sensitive_column] if isinstance(sensitive_column, str) else list(sensitive_column)
            names = [self.group_names[g] for g in self.sensitive]
            if len(columns) == 1:
                frame[columns[0]] = names
            else:
                parts = [name.split("|") for name in names]
                if any(len(p) != len(columns) for p in parts):
                    raise InvalidArgumentError(f"Group names do not split into {len(columns)} columns")
                for j, column in enumerate(columns):
                    frame[column] = [p[j] for p in parts]
        frame[label_column] = [self.label_names[k] for k in self.labels]
        return frame

    def to_csv(self, label_column: str = "y", sensitive_column: Union[str, Sequence[str]] = "s") -> str:
        """Render as RFC-4180 CSV text with a header row"""
        return self.to_frame(label_column, sensitive_column).to_csv(
            index=False, lineterminator="\n", float_format="%.17g"
        )


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test split protocol"""
    test_fraction: float = 0.3
    val_fraction_of_train: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction_of_train"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise InvalidArgumentError(f"{name} must lie strictly between 0 and 1, got {value}")


def generate_toy(n: int = 1000, seed: int = 0) -> Dataset:
    """
    Sample the two-group toy problem

    The majority group (S=1, 90%) is separable on X1 alone; the minority
    group (S=0) needs both coordinates and has a wider spread. Labels are
    uniform within each group. The data is returned unstandardized.
    """
    if n < TOY_MIN_SIZE:
        raise InvalidArgumentError(f"Toy generator needs n >= {TOY_MIN_SIZE}, got {n}")

    rng = np.random.default_rng(seed)
    sensitive = (rng.random(n) < TOY_MAJORITY_PROB).astype(np.int64)
    labels = rng.integers(0, 2, size=n)
    noise = rng.standard_normal((n, 2))

    features = np.empty((n, 2))
    for (group, label), (mean, variance) in TOY_COMPONENTS.items():
        mask = (sensitive == group) & (labels == label)
        features[mask] = np.asarray(mean) + np.sqrt(variance) * noise[mask]

    logger.debug(f"Generated toy dataset: n={n}, seed={seed}, majority={int(sensitive.sum())}")
    return Dataset(
        features=features,
        labels=labels,
        sensitive=sensitive,
        feature_names=("x1", "x2"),
        label_names=("0", "1"),
        group_names=("0", "1"),
    )


def _encode_groups(frame: pd.DataFrame, columns: List[str]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Intersectional group ids in first-appearance order"""
    keys = frame[columns].astype(str).agg("|".join, axis=1)
    codes, uniques = pd.factorize(keys, sort=False)
    return codes.astype(np.int64), tuple(str(u) for u in uniques)


def _read_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"CSV file is empty: {path}")
    except pd.errors.ParserError as e:
        raise DataError(f"Could not parse {path}: {e}")
    if frame.empty:
        raise DataError(f"CSV file has a header but no rows: {path}")
    return frame


def _numeric_block(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> np.ndarray:
    features = np.empty((len(frame), len(columns)))
    for j, column in enumerate(columns):
        cells = frame[column].str.strip()
        try:
            # correctly rounded, unlike the pandas fast parser
            values = cells.astype(float)
        except ValueError:
            values = pd.to_numeric(cells, errors="coerce")
        bad = values.isna().to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            # header is line 1
            raise DataError(
                f"Non-numeric or missing value {frame[column].iloc[row]!r} "
                f"at line {row + 2}, column '{column}' of {path}"
            )
        features[:, j] = values.to_numpy(dtype=float)
    return features


def csv_columns(path: Union[str, Path]) -> List[str]:
    """Header of a CSV file"""
    return list(_read_frame(Path(path)).columns)


def load_features(path: Union[str, Path], feature_columns: Sequence[str]) -> np.ndarray:
    """Feature matrix of an unlabeled CSV, columns taken by name in the given order"""
    path = Path(path)
    frame = _read_frame(path)
    missing = [c for c in feature_columns if c not in frame.columns]
    if missing:
        raise DataError(f"Feature columns {missing} not found in {path}; available: {list(frame.columns)}")
    return _numeric_block(frame, feature_columns, path)


def load_csv(path: Union[str, Path],
             label_column: str,
             sensitive_column: Optional[Union[str, Sequence[str]]] = None,
             exclude_columns: Sequence[str] = (),
             feature_columns: Optional[Sequence[str]] = None,
             label_names: Optional[Sequence[str]] = None) -> Dataset:
    """
    Load a headered CSV of numeric features

    Args:
        path: CSV file path
        label_column: Name of the class label column
        sensitive_column: Column name, or several names for intersectional groups
        exclude_columns: Metadata columns that are neither features nor labels
        feature_columns: Explicit feature columns (extra columns are ignored)
        label_names: Enforce a known label encoding, e.g. the one a model was trained with

    Returns:
        Dataset with labels encoded as 0..|Y|-1
    """
    path = Path(path)
    frame = _read_frame(path)

    if isinstance(sensitive_column, str):
        sensitive_columns = [sensitive_column]
    else:
        sensitive_columns = list(sensitive_column or [])

    for column in [label_column] + sensitive_columns + list(feature_columns or []):
        if column not in frame.columns:
            raise DataError(f"Column '{column}' not found in {path}; available: {list(frame.columns)}")

    reserved = {label_column, *sensitive_columns, *exclude_columns}
    if feature_columns is None:
        feature_columns = [c for c in frame.columns if c not in reserved]
    feature_columns = list(feature_columns)
    if not feature_columns:
        raise DataError(f"No feature columns left in {path}")

    features = _numeric_block(frame, feature_columns, path)

    raw_labels = frame[label_column].str.strip()
    if (raw_labels == "").any():
        row = int(np.flatnonzero((raw_labels == "").to_numpy())[0])
        raise DataError(f"Missing label at line {row + 2}, column '{label_column}' of {path}")
    if label_names is not None:
        lookup = {name: k for k, name in enumerate(label_names)}
        unknown = sorted(set(raw_labels) - set(lookup))
        if unknown:
            raise DataError(f"Labels {unknown} in column '{label_column}' are not among {list(label_names)}")
        labels = raw_labels.map(lookup).to_numpy(dtype=np.int64)
        names = tuple(label_names)
    else:
        encoder = LabelEncoder().fit(raw_labels)
        labels = encoder.transform(raw_labels).astype(np.int64)
        names = tuple(str(c) for c in encoder.classes_)

    sensitive, group_names = None, ()
    if sensitive_columns:
        for column in sensitive_columns:
            empty = (frame[column].str.strip() == "").to_numpy()
            if empty.any():
                row = int(np.flatnonzero(empty)[0])
                raise DataError(f"Missing sensitive value at line {row + 2}, column '{column}' of {path}")
        sensitive, group_names = _encode_groups(frame, sensitive_columns)

    logger.info(
        f"Loaded {len(frame)} rows, {len(feature_columns)} features, {len(names)} classes"
        + (f", {len(group_names)} groups" if sensitive_columns else "")
        + f" from {path}"
    )
    return Dataset(
        features=features,
        labels=labels,
        sensitive=sensitive,
        feature_names=tuple(feature_columns),
        label_names=names,
        group_names=group_names,
    )


def standardize(ds: Dataset, reference: Optional[Dataset] = None) -> Dataset:
    """
    Z-score every feature column

    Statistics come from ``reference`` when given (the training portion of a
    split), else from ``ds`` itself. The fitted transform is stored on the
    result so it can be replayed onto held-out data.
    """
    if reference is not None and reference.standardization is not None:
        transform = reference.standardization
    elif reference is not None:
        transform = Standardization.fit(reference.features)
    else:
        transform = Standardization.fit(ds.features)
    if transform.constant_columns:
        names = [ds.feature_names[j] for j in transform.constant_columns]
        logger.warning(f"Constant feature columns mapped to zero: {names}")
    return replace(ds, features=transform.apply(ds.features), standardization=transform)


def standardize_split(train: Dataset, *others: Dataset) -> Tuple[Dataset, ...]:
    """Fit on train, replay the same transform on the other parts"""
    fitted = standardize(train)
    return (fitted,) + tuple(standardize(part, reference=fitted) for part in others)


def _sklearn_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), stream]).generate_state(1)[0])


def _stratified_split(n_rows: np.ndarray, labels: np.ndarray, fraction: float, seed: int):
    try:
        return train_test_split(n_rows, test_size=fraction, stratify=labels, random_state=seed)
    except ValueError as e:
        raise InvalidArgumentError(f"Degenerate split: {e}")


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Stratified train/validation/test split

    Stratification is by class label only; group ids are never consulted.

    Returns:
        (train, val, test) with disjoint index sets covering all rows
    """
    if len(np.unique(ds.labels)) < 2:
        raise InvalidArgumentError("Cannot split a single-class dataset")

    rows = np.arange(ds.n_samples)
    rest, test = _stratified_split(rows, ds.labels, spec.test_fraction, _sklearn_seed(spec.seed, 0))
    train, val = _stratified_split(rest, ds.labels[rest], spec.val_fraction_of_train,
                                   _sklearn_seed(spec.seed, 1))

    if len(train) < 2 or len(np.unique(ds.labels[train])) < 2:
        raise InvalidArgumentError("Training part needs at least 2 instances and 2 classes")
    if len(val) == 0 or len(test) == 0:
        raise InvalidArgumentError("Split produced an empty validation or test part")

    logger.info(f"Split {ds.n_samples} rows into train={len(train)}, val={len(val)}, test={len(test)}")
    return ds.subset(np.sort(train)), ds.subset(np.sort(val)), ds.subset(np.sort(test))
