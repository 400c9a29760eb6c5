#!/usr/bin/python3
"""Long-running atheris harness for the DTEN, PGM and manifest parsers.

    python3 fuzz/fuzz_formats.py -max_len=4096

Every input must either parse or raise one of the structured crfrefine errors.
"""
import sys
import tempfile

import atheris

with atheris.instrument_imports():
    from crfrefine.errors import FormatError, InvalidInputError, ManifestError
    from crfrefine.io_formats import decode_pgm_mask, decode_tensor, encode_tensor, parse_manifest


def test_one_input(data: bytes) -> None:
    selector, payload = (data[0], data[1:]) if data else (0, b"")
    if selector % 3 == 0:
        try:
            tensor = decode_tensor(payload)
        except FormatError:
            return
        assert encode_tensor(tensor) == payload
    elif selector % 3 == 1:
        try:
            decode_pgm_mask(payload)
        except (FormatError, InvalidInputError):
            return
    else:
        text = payload.decode("utf-8", errors="replace")
        try:
            parse_manifest(text, tempfile.gettempdir(), check_files=False)
        except ManifestError:
            return


def main() -> None:
    atheris.Setup(sys.argv, test_one_input)
    atheris.Fuzz()


if __name__ == "__main__":
    main()
