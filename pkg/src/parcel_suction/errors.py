"""Exception hierarchy shared by every module."""


class ParcelSuctionError(Exception):
    """Base class for all library errors."""


class TooFewPoints(ParcelSuctionError):
    pass


class OutOfRange(ParcelSuctionError):
    pass


class MeshFormatError(ParcelSuctionError):
    pass


class BadDims(ParcelSuctionError):
    pass


class OpenMesh(ParcelSuctionError):
    pass


class PlacementFailed(ParcelSuctionError):
    pass


class EmptyView(ParcelSuctionError):
    pass


class ContactOffSurface(ParcelSuctionError):
    pass


class DegenerateView(ParcelSuctionError):
    pass


class BadT(ParcelSuctionError):
    pass


class BadSteps(ParcelSuctionError):
    pass


class ShapeMismatch(ParcelSuctionError):
    pass


class MissingNormals(ParcelSuctionError):
    pass


class EmptyDataset(ParcelSuctionError):
    pass


class NoPredictions(ParcelSuctionError):
    pass


class SceneFormatError(ParcelSuctionError):
    """A scene directory is missing files or holds unparsable content."""
