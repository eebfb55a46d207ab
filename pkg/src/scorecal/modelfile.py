"""Line-oriented ``key=value`` model files with hex-float parameters.

Every real number is written with :meth:`float.hex`, so a model read back from
disk is bit-identical to the one that was saved.
"""

from __future__ import annotations

from pathlib import Path

from .errors import FormatError
from .linear import LinearCalibration
from .neural import MagnetoModel, SonetModel, parse_header

MODEL_KINDS = ("linear", "magneto", "sonet")


def model_lines(model) -> list[str]:
    if isinstance(model, LinearCalibration):
        return ["calib.kind=linear", *model.to_lines("calib")]
    if isinstance(model, (MagnetoModel, SonetModel)):
        return model.to_lines()
    raise TypeError(f"cannot serialize {type(model).__name__}")


def write_model(model, path) -> None:
    Path(path).write_text("\n".join(model_lines(model)) + "\n", encoding="utf-8")


def parse_fields(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for k, line in enumerate(text.splitlines()):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"model line {k + 1}: expected key=value")
        fields[key.strip()] = value.strip()
    return fields


def model_from_fields(fields: dict[str, str]):
    kind = fields.get("calib.kind")
    if kind == "linear":
        return LinearCalibration.from_fields(fields, "calib")
    if kind == "magneto":
        return MagnetoModel.from_fields(fields, parse_header(fields))
    if kind == "sonet":
        return SonetModel.from_fields(fields, parse_header(fields))
    raise FormatError(f"unknown model kind {kind!r} (expected one of {', '.join(MODEL_KINDS)})")


def read_model(path):
    return model_from_fields(parse_fields(Path(path).read_text(encoding="utf-8")))
