"""Multi-agent train rescheduling lab: rail grid simulator, section-tree
observations, an FC-LSTM actor-critic trained with asynchronous advantage
actor-critic, and a two-agent communication experiment."""

__version__ = "0.1.0"
