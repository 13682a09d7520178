"""Modality composition awareness lab."""
