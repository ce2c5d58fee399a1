"""Rim cross-section profiles (one per domain) and the benchmark generator config."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .types import MIN_RESOLUTION, DataError


@dataclass(frozen=True)
class DomainProfile:
    """Shape family of one rim type.

    Thicknesses are in normalized grid units (the grid spans [-1, 1]). The
    wall thickness along the wheel axis z is
    ``rim_thickness + taper * z + bump_amp * exp(-((z - bump_center) / 0.35)**2)``.
    """

    domain_id: str
    rim_thickness: float
    taper: float = 0.0
    bump_amp: float = 0.0
    bump_center: float = 0.0
    mass_center: float = 0.5  # mean barrier mass as a fraction of the mass range
    jitter: float = 0.12  # per-sample relative spread of rim_thickness


DEFAULT_PROFILES = (
    DomainProfile("rim1", 0.30, taper=0.00, bump_amp=0.00, bump_center=0.0, mass_center=0.45),
    DomainProfile("rim2", 0.26, taper=0.06, bump_amp=0.04, bump_center=0.3, mass_center=0.50),
    DomainProfile("rim3", 0.22, taper=0.10, bump_amp=0.00, bump_center=0.0, mass_center=0.55),
    DomainProfile("rim4", 0.15, taper=-0.04, bump_amp=0.07, bump_center=-0.3, mass_center=0.60),
    DomainProfile("rim5", 0.28, taper=-0.08, bump_amp=0.10, bump_center=0.0, mass_center=0.40),
)

# sample counts of the five rim types in the original wheel dataset
TABLE1_COUNTS = (271, 332, 469, 467, 476)


@dataclass
class GeneratorConfig:
    resolution: int = 16
    num_domains: int = 5
    samples_per_domain: list[int] = field(default_factory=lambda: [200] * 5)
    mass_range_kg: tuple[float, float] = (498.0, 558.0)
    seed: int = 0
    domain_profile_params: list[DomainProfile] | None = None
    extent_mm: float = 480.0

    def __post_init__(self):
        self.samples_per_domain = [int(n) for n in self.samples_per_domain]
        self.mass_range_kg = tuple(float(v) for v in self.mass_range_kg)
        if self.domain_profile_params is None:
            if self.num_domains > len(DEFAULT_PROFILES):
                raise DataError(f"no default profiles for {self.num_domains} domains; pass domain_profile_params")
            self.domain_profile_params = list(DEFAULT_PROFILES[: self.num_domains])
        else:
            self.domain_profile_params = [
                p if isinstance(p, DomainProfile) else DomainProfile(**p) for p in self.domain_profile_params
            ]
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.resolution, int) or self.resolution < MIN_RESOLUTION:
            raise DataError(f"resolution must be an integer >= {MIN_RESOLUTION}, got {self.resolution!r}")
        if self.num_domains < 1:
            raise DataError("num_domains must be >= 1")
        if len(self.samples_per_domain) != self.num_domains:
            raise DataError(
                f"num_domains={self.num_domains} but samples_per_domain has {len(self.samples_per_domain)} entries"
            )
        if len(self.domain_profile_params) != self.num_domains:
            raise DataError(
                f"num_domains={self.num_domains} but domain_profile_params has {len(self.domain_profile_params)} entries"
            )
        if any(n < 1 for n in self.samples_per_domain):
            raise DataError("every domain needs at least one sample")
        low, high = self.mass_range_kg
        if not low < high:
            raise DataError(f"mass range must satisfy low < high, got {self.mass_range_kg}")
        if low <= 0:
            raise DataError("mass range must be positive")
        if not self.extent_mm > 0:
            raise DataError("extent_mm must be positive")
        ids = [p.domain_id for p in self.domain_profile_params]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate domain ids: {ids}")

    @property
    def cell_size_mm(self) -> float:
        return self.extent_mm / self.resolution

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mass_range_kg"] = list(self.mass_range_kg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**known)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def profile(self, domain_id: str) -> DomainProfile:
        for p in self.domain_profile_params:
            if p.domain_id == domain_id:
                return p
        raise KeyError(domain_id)
