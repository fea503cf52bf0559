from .store import ClassDescriptions, DescriptionFile, STYLES
from .filtering import (
    base_name_variants,
    filter_name,
    strip_names,
    verify_name_free,
    VerificationReport,
)
from .providers import FixtureProvider, RemoteLLMProvider, generate_descriptions

__all__ = [
    "ClassDescriptions",
    "DescriptionFile",
    "STYLES",
    "base_name_variants",
    "filter_name",
    "strip_names",
    "verify_name_free",
    "VerificationReport",
    "FixtureProvider",
    "RemoteLLMProvider",
    "generate_descriptions",
]
