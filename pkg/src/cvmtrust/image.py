"""CVM image file format and boot-stage vocabulary.

Image file::

    magic "CVMI" || version:u8 || encode(uefi_region, payload_region, metadata_json)

The payload region (possibly AEAD-sealed under an image key) decodes to::

    encode(encode_list(stage records), encode_list(extra records))
    stage := encode(stage_name, label, content)
    extra := encode(name, value)
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field

from .crypto import Digest, hash
from .encoding import DecodeError, as_str, decode, decode_list, encode, encode_list

IMAGE_MAGIC = b"CVMI"
IMAGE_VERSION = 1


class BootStage(enum.Enum):
    Uefi = "Uefi"
    Bootloader = "Bootloader"
    Kernel = "Kernel"
    Application = "Application"

    @property
    def order(self):
        return _STAGE_ORDER[self]

    @property
    def pcr(self):
        return STAGE_PCR[self]


_STAGE_ORDER = {s: i for i, s in enumerate(BootStage)}

#: Which register each boot stage is extended into.
STAGE_PCR = {
    BootStage.Uefi: 0,
    BootStage.Bootloader: 4,
    BootStage.Kernel: 8,
    BootStage.Application: 10,
}


@dataclass(frozen=True)
class StageContent:
    stage: BootStage
    label: str
    content: bytes = field(repr=False)

    @property
    def measurement(self) -> Digest:
        return hash(self.content)


def build_payload(stages, extras=None):
    stage_recs = [encode(s.stage.value, s.label, s.content) for s in stages]
    extra_recs = [encode(k, v) for k, v in sorted((extras or {}).items())]
    return encode(encode_list(stage_recs), encode_list(extra_recs))


def parse_payload(raw):
    try:
        stage_raw, extra_raw = decode(raw, 2)
        stages = []
        for rec in decode_list(stage_raw):
            name, label, content = decode(rec, 3)
            stages.append(StageContent(BootStage(as_str(name)), as_str(label), content))
        extras = {}
        for rec in decode_list(extra_raw):
            k, v = decode(rec, 2)
            extras[as_str(k)] = v
    except (DecodeError, ValueError) as exc:
        raise ValueError(f"malformed image payload: {exc}") from None
    return stages, extras


@dataclass
class CvmImage:
    uefi_region: bytes = field(repr=False)
    payload_region: bytes = field(repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.metadata.get("name", "")

    @property
    def kind(self):
        return self.metadata.get("kind", "acvm")

    @property
    def encrypted(self):
        return bool(self.metadata.get("encrypted", False))

    def stages(self):
        if self.encrypted:
            raise ValueError("payload is encrypted")
        return parse_payload(self.payload_region)[0]

    def to_bytes(self):
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        return IMAGE_MAGIC + bytes([IMAGE_VERSION]) + encode(self.uefi_region, self.payload_region, meta)

    @classmethod
    def from_bytes(cls, raw):
        raw = bytes(raw)
        if raw[:4] != IMAGE_MAGIC or len(raw) < 5:
            raise ValueError("not a CVM image")
        if raw[4] != IMAGE_VERSION:
            raise ValueError(f"unsupported image version {raw[4]}")
        try:
            uefi, payload, meta = decode(raw[5:], 3)
        except DecodeError as exc:
            raise ValueError(f"malformed image: {exc}") from None
        return cls(uefi, payload, json.loads(meta))

    def copy(self):
        return CvmImage(self.uefi_region, self.payload_region, dict(self.metadata))


def measure_image_init(image: CvmImage) -> Digest:
    """The launch-time measurement: hash of the UEFI region only."""
    return hash(image.uefi_region)


def golden_events(image: CvmImage):
    return [s.measurement for s in image.stages()]


def random_image(seed, name=None, *, applications=2, stage_size=(64, 512), uefi_size=256, uefi=None):
    """Deterministic pseudo-random ACVM image for scenarios and tests."""
    rng = random.Random(seed)

    def blob(label):
        n = rng.randint(*stage_size)
        return label.encode() + b"\0" + rng.randbytes(n)

    stages = [
        StageContent(BootStage.Bootloader, "grub", blob("grub")),
        StageContent(BootStage.Kernel, "vmlinuz", blob("vmlinuz")),
    ]
    stages += [
        StageContent(BootStage.Application, f"app{i}", blob(f"app{i}")) for i in range(applications)
    ]
    uefi_region = uefi if uefi is not None else b"OVMF\0" + rng.randbytes(uefi_size)
    return CvmImage(
        uefi_region,
        build_payload(stages),
        {"name": name or f"acvm-{seed}", "version": "1", "kind": "acvm"},
    )
