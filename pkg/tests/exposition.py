"""Independent Prometheus text-format (v0.0.4) grammar checker.

Written from the exposition-format grammar, deliberately sharing no code
with gatekit.metrics, so it can vouch for the renderer's output.
"""
import math
import re

_NAME = r"[a-zA-Z_:][a-zA-Z0-9_:]*"
_LABEL_NAME = r"[a-zA-Z_][a-zA-Z0-9_]*"
_TYPE_LINE = re.compile(rf"# TYPE ({_NAME}) (counter|gauge|histogram|summary|untyped)\Z")
_HELP_LINE = re.compile(rf"# HELP ({_NAME}) .*\Z")
_SAMPLE_LINE = re.compile(
    rf"({_NAME})(?:\{{((?:{_LABEL_NAME}=\"(?:[^\"\\\n]|\\\\|\\\"|\\n)*\",?)*)\}})?"
    rf" (\S+)( -?\d+)?\Z"
)
_VALUE = re.compile(r"[-+]?(\d+(\.\d*)?([eE][-+]?\d+)?|\.\d+([eE][-+]?\d+)?|Inf|inf)\Z|\+Inf\Z|NaN\Z")


class ExpositionFormatError(AssertionError):
    pass


def validate_exposition(text: str) -> dict:
    """Check text against the exposition grammar; returns {metric: type}.

    Raises ExpositionFormatError with the offending line on any violation.
    """
    types: dict[str, str] = {}
    seen_series: set[str] = set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        if line != line.strip():
            raise ExpositionFormatError(f"line {lineno}: stray whitespace: {line!r}")
        if line.startswith("#"):
            if _HELP_LINE.match(line):
                continue
            m = _TYPE_LINE.match(line)
            if not m:
                raise ExpositionFormatError(f"line {lineno}: bad comment line: {line!r}")
            name, kind = m.group(1), m.group(2)
            if name in types:
                raise ExpositionFormatError(f"line {lineno}: duplicate TYPE for {name}")
            types[name] = kind
            continue
        m = _SAMPLE_LINE.match(line)
        if not m:
            raise ExpositionFormatError(f"line {lineno}: bad sample line: {line!r}")
        name, labels, value = m.group(1), m.group(2), m.group(3)
        if not _VALUE.match(value):
            raise ExpositionFormatError(f"line {lineno}: bad value {value!r}")
        float(value.replace("+Inf", "inf").replace("Inf", "inf"))
        base = name
        for suffix in ("_bucket", "_sum", "_count"):
            if name.endswith(suffix) and types.get(name[: -len(suffix)]) == "histogram":
                base = name[: -len(suffix)]
                break
        if base not in types:
            raise ExpositionFormatError(f"line {lineno}: sample {name} has no TYPE declaration")
        if types[base] == "histogram" and name.endswith("_bucket") and 'le="' not in (labels or ""):
            raise ExpositionFormatError(f"line {lineno}: histogram bucket without le label")
        series = f"{name}{{{labels or ''}}}"
        if series in seen_series:
            raise ExpositionFormatError(f"line {lineno}: duplicate series {series}")
        seen_series.add(series)
        if types[base] == "counter" and float(value) < 0:
            raise ExpositionFormatError(f"line {lineno}: negative counter {name}")
        if not name.endswith("_bucket") and value not in ("+Inf", "NaN"):
            if not math.isfinite(float(value)):
                raise ExpositionFormatError(f"line {lineno}: non-finite sample value")
    return types
