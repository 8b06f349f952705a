"""Minimal module/parameter registry.

Parameters are :class:`Tensor` attributes created through
:meth:`Module.param`; buffers (BN running statistics) are plain arrays
registered through :meth:`Module.buffer`. Both are addressed by dotted
paths such as ``backbone.stage1.conv.weight``.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from ..tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        children = self.__dict__.get("_children")
        if isinstance(value, Module):
            children[name] = value
        elif children is not None and name in children:
            del children[name]
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        self._params.pop(name, None)
        self._buffers.pop(name, None)
        self._children.pop(name, None)
        object.__delattr__(self, name)

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        object.__setattr__(self, name, data)
        return data

    def set_buffer(self, name: str, data: np.ndarray) -> None:
        self._buffers[name] = data
        object.__setattr__(self, name, data)

    # -- traversal ---------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for mod_path, mod in self.named_modules(prefix):
            for name, t in mod._params.items():
                yield (f"{mod_path}.{name}" if mod_path else name), t

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_path, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_path}.{name}" if mod_path else name), b

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer by path, in registration order."""
        out = {name: t.data for name, t in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], source: str = "") -> None:
        from ..errors import FormatError

        own = self.state_dict()
        for name in state:
            if name not in own:
                raise FormatError(f"unexpected tensor {name!r} not present in the model", source)
        for name, ref in own.items():
            if name not in state:
                raise FormatError(f"missing tensor {name!r}", source)
            if state[name].shape != ref.shape:
                raise FormatError(f"tensor {name!r} has shape {state[name].shape}, model expects {ref.shape}", source)
        params = dict(self.named_parameters())
        for mod_path, mod in self.named_modules():
            for bname in list(mod._buffers):
                full = f"{mod_path}.{bname}" if mod_path else bname
                mod.set_buffer(bname, np.array(state[full], copy=True))
        for name, t in params.items():
            t.data = np.array(state[name], dtype=state[name].dtype, copy=True)

    # -- mode / dtype --------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
        for _, mod in self.named_modules():
            for bname, b in list(mod._buffers.items()):
                mod.set_buffer(bname, b.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]
