"""
Checkpoint hooks.

A hookable object exposes a :py:class:`HookController`. Firing the controller does the controller's own work first,
then calls its hooks in the order they were added. Hooks take no arguments: they are told that something happened,
and pull what happened from the object that fired.
"""

from __future__ import annotations

from typing import Any, Callable, MutableSequence, Union

try:
    from typing_extensions import TypeAlias
except ImportError:  # pragma: no cover
    from typing import TypeAlias  # type: ignore  # pragma: no cover


class Hookable:
    """
    Define an object others can hook into.
    """

    hooks: HookController

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)


class HookController:
    def __init__(self) -> None:
        self._hooks: MutableSequence[Hook] = []

    def __call__(self, *hooks: ResolvableHook) -> None:
        self.add(*hooks)

    def fire(self) -> None:
        self._on_fire()
        for hook in list(self._hooks):
            hook()

    def _on_fire(self) -> None:
        pass

    def add(self, *hooks: ResolvableHook) -> None:
        for hook in hooks:
            resolved_hook = hook.hooks.fire if isinstance(hook, Hookable) else hook
            if resolved_hook not in self._hooks:
                self._hooks.append(resolved_hook)

    def remove(self, hook: Hook) -> None:
        self._hooks.remove(hook)


Hook: TypeAlias = Callable[[], Any]
ResolvableHook: TypeAlias = Union[Hook, Hookable]
