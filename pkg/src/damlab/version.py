"""Single source of the package version, importable without the package root."""

VERSION = "0.1.0"
