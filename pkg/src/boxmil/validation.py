"""Exceptions and small input-validation helpers shared across the package."""

import numpy as np


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class BoundsError(ContractError):
    """A box or coordinate lies outside the array it refers to."""


class EvaluationError(ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class GenerationError(RuntimeError):
    """Synthetic data could not be generated for a given image index."""

    def __init__(self, index, message):
        super().__init__(f"image {index}: {message}")
        self.index = index


class FormatError(ValueError):
    """A file did not match the expected on-disk format."""


def require(cond, message, exc=ContractError):
    if not cond:
        raise exc(message)


def check_image(image, *, ndim=2, multiple_of=None, name="image"):
    """Return ``image`` as a finite float array, validating rank and divisibility."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    if multiple_of is not None:
        h, w = arr.shape[-2:]
        if h % multiple_of or w % multiple_of:
            raise ContractError(
                f"{name} dims {h}x{w} must be divisible by {multiple_of}")
    return arr


def check_images(images, *, multiple_of=None):
    """Stack a sequence of equally sized 2-D images into an (N, H, W) array."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"expected (N, H, W) images, got shape {arr.shape}")
    return check_image(arr, ndim=3, multiple_of=multiple_of, name="images")


def check_prediction(pred):
    """Validate an H x W x C prediction map with entries in [0, 1]."""
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ContractError(f"prediction map must be H x W x C, got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("prediction values must lie in [0, 1]")
    return arr
