"""Exception hierarchy shared by all sitealign modules."""


class SiteAlignError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class ValidationError(SiteAlignError):
    """Malformed or out-of-range input (CLI exit code 2 / HTTP 400)."""

    code = "validation"


class BehindCamera(SiteAlignError):
    """Point has non-positive depth in the camera frame."""

    code = "behind-camera"


class NoConvergence(SiteAlignError):
    """Iterative inversion failed to converge."""

    code = "no-convergence"


class DegenerateConfiguration(SiteAlignError):
    """Geometric input admits no unique solution (collinear, coplanar...)."""

    code = "degenerate-configuration"


class ImageTooSmall(ValidationError):
    code = "image-too-small"


class InsufficientMatches(SiteAlignError):
    code = "insufficient-matches"


class InsufficientCorrespondences(SiteAlignError):
    code = "insufficient-correspondences"


class SolverDiverged(SiteAlignError):
    """Optimizer produced a non-finite cost."""

    code = "solver-diverged"


class NoConsensus(SiteAlignError):
    """RANSAC found no hypothesis with enough inliers."""

    code = "no-consensus"


class NarrowBaseline(SiteAlignError):
    """Triangulation rejected: all ray pairs closer than the angle gate."""

    code = "narrow-baseline"


class MissedModel(SiteAlignError):
    """Pick ray does not intersect the building model."""

    code = "missed-model"


class NoCloudCoverage(SiteAlignError):
    """No triangulated points project onto the model in this view."""

    code = "no-cloud-coverage"


class InsufficientFrames(SiteAlignError):
    """Aligned stack lacks frames besides the target."""

    code = "insufficient-frames"


class NothingOnModel(SiteAlignError):
    """Annotation geometry misses the model entirely."""

    code = "nothing-on-model"


class NotVisible(SiteAlignError):
    """Annotation footprint entirely hidden in the target view."""

    code = "not-visible"


class NoTemporalData(SiteAlignError):
    """Neither an aligned past frame nor a model snapshot applies."""

    code = "no-temporal-data"


class StaleState(SiteAlignError):
    """Mutation submitted against an outdated pipeline revision (HTTP 409)."""

    code = "stale-state"


class UnknownId(SiteAlignError):
    """Referenced image/annotation/component does not exist (HTTP 404)."""

    code = "unknown-id"


class AssistRequired(SiteAlignError):
    """Automatic registration is exhausted; human correspondences needed.

    Carries the structured request so CLI/service layers can surface it
    (CLI exit code 3).
    """

    code = "assist-required"

    def __init__(self, request):
        super().__init__(f"assist required for image {request.image_id!r}: {request.reason}")
        self.request = request
