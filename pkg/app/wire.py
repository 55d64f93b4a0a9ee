import struct
from typing import Annotated

from pydantic import BeforeValidator, PlainSerializer


def float_to_bits(value):
    """IEEE-754 double as a 16-digit hex bit pattern, e.g. 1.0 -> '3ff0000000000000'."""
    return struct.pack(">d", float(value)).hex()


def bits_to_float(value):
    if isinstance(value, str):
        try:
            return struct.unpack(">d", bytes.fromhex(value))[0]
        except (ValueError, struct.error):
            raise ValueError(f"Not an IEEE-754 bit pattern: {value!r}")
    return value


# Floats that survive JSON bit-exactly: serialized as bit patterns, parsed from either form.
WireFloat = Annotated[
    float,
    BeforeValidator(bits_to_float),
    PlainSerializer(float_to_bits, return_type=str, when_used="json"),
]
