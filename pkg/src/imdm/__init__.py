"""Masked and infinite-mask discrete diffusion on small enumerable problems."""
