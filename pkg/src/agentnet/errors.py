"""Exception hierarchy shared across the package."""


class AgentNetError(Exception):
    """Base class for all package errors."""


class ConfigError(AgentNetError):
    """Invalid pool, run configuration, or gateway configuration."""


class GraphError(AgentNetError):
    """Structural problem in the layered collaboration graph."""


class ReformationError(GraphError):
    """Team reformation asked for an impossible survivor set."""


class GatewayError(AgentNetError):
    """Backend call failed after exhausting retries."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class RatingParseError(AgentNetError):
    """Peer-rating block missing or malformed in a response."""


class RankParseError(AgentNetError):
    """Ranker response could not be parsed as a total order."""


class AttributionError(AgentNetError):
    """Importance back-propagation hit a node without usable weights."""


class SelectionError(AgentNetError):
    """Team selection asked for more agents than participated."""


class MetricError(AgentNetError):
    """Agreement metric over a degenerate (zero-mass) distribution."""


class RunError(AgentNetError):
    """Inference aborted; carries the partial transcript."""

    def __init__(self, message, graph=None):
        super().__init__(message)
        self.graph = graph
