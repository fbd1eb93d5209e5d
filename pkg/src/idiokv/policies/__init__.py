"""Policy registry and factory for pluggable eviction policies.

The registry maps policy names to ``EvictionPolicy`` classes. It comes
pre-loaded with ``streaming``, ``snapkv`` and ``compresskv`` and can be
extended with custom policies.
"""

import importlib
from typing import Dict, Optional, Type

from ..heads import HeadScoreTable
from ..logging_config import get_logger
from .base import EvictionPolicy, PolicyParams
from .compresskv import CompressKVPolicy, compresskv_policy
from .snapkv import SnapKVPolicy, snapkv_group_decisions, snapkv_policy
from .streaming import StreamingPolicy, streaming_policy

logger = get_logger(__name__)


class PolicyRegistry:
    """Registry of available eviction policies.

    Example:
        ```python
        from idiokv.policies import get_policy_registry

        registry = get_policy_registry()
        registry.register_from_path("earliest", "my_pkg.policies.KeepEarliest")
        policy = registry.get_policy("earliest")
        ```
    """

    def __init__(self):
        self._policies: Dict[str, Type[EvictionPolicy]] = {
            StreamingPolicy.name: StreamingPolicy,
            SnapKVPolicy.name: SnapKVPolicy,
            CompressKVPolicy.name: CompressKVPolicy,
        }

    def register(self, name: str, policy_class: Type[EvictionPolicy]) -> None:
        """Register a custom policy class.

        Raises:
            TypeError: If ``policy_class`` does not extend EvictionPolicy
        """
        if not (isinstance(policy_class, type) and issubclass(policy_class, EvictionPolicy)):
            raise TypeError(f"{policy_class} must be an EvictionPolicy subclass")
        self._policies[name] = policy_class
        logger.info(f"Registered policy: {name} -> {policy_class.__name__}")

    def register_from_path(self, name: str, class_path: str) -> None:
        """Register a policy from a dotted path such as ``pkg.module.Class``.

        Raises:
            ImportError: If the module or class cannot be imported
            TypeError: If the class does not extend EvictionPolicy
        """
        module_path, class_name = class_path.rsplit(".", 1)
        module = importlib.import_module(module_path)
        self.register(name, getattr(module, class_name))

    def get_policy(
        self,
        name: str,
        params: PolicyParams | None = None,
        head_table: HeadScoreTable | None = None,
        num_kv_heads: int = 1,
    ) -> EvictionPolicy:
        """Instantiate a registered policy.

        Raises:
            KeyError: If ``name`` is not registered
        """
        if name not in self._policies:
            available = ", ".join(self._policies)
            raise KeyError(f"Policy '{name}' not found. Available policies: {available}")
        return self._policies[name](params, head_table, num_kv_heads)

    def list_policies(self) -> Dict[str, str]:
        """Map of policy name to class name."""
        return {name: cls.__name__ for name, cls in self._policies.items()}


_policy_registry: Optional[PolicyRegistry] = None


def get_policy_registry() -> PolicyRegistry:
    """Get the global policy registry."""
    global _policy_registry
    if _policy_registry is None:
        _policy_registry = PolicyRegistry()
    return _policy_registry


__all__ = [
    "EvictionPolicy",
    "PolicyParams",
    "PolicyRegistry",
    "get_policy_registry",
    "StreamingPolicy",
    "SnapKVPolicy",
    "CompressKVPolicy",
    "streaming_policy",
    "snapkv_policy",
    "snapkv_group_decisions",
    "compresskv_policy",
]
