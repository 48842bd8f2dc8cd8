"""Shared exception hierarchy."""


class FlowgateError(Exception):
    """Base class for all errors raised by this package."""


class PatternError(FlowgateError):
    """Structurally invalid flow or request pattern."""


class DissectionError(FlowgateError):
    """Frame too short or otherwise unparseable at the outermost layer."""


class PolicyError(FlowgateError):
    """Invalid policy, predicate tree, or attribute catalog."""


class EvaluationError(FlowgateError):
    """Auxiliary predicate evaluation could not produce a boolean.

    Callers map this to a denying outcome; it is never silently defaulted.
    """


class ClassificationError(PolicyError):
    """Policy references an attribute key missing from the catalog."""


class DecisionError(FlowgateError):
    """Invalid access decision or decision-selection input."""


class AttributeResolutionError(FlowgateError):
    """Attribute values could not be fetched from their source."""


class ConfigError(FlowgateError):
    """Malformed service configuration."""


class ServiceStartupError(FlowgateError):
    """A service failed to start, e.g. an endpoint is already in use."""


class TransportError(FlowgateError):
    """Connection or send/receive failure on a control-plane channel."""
