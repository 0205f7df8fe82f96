"""_run_file.py.

Declarative run files for the command-line tool.

A run file is a YAML mapping whose keys are flag names (with dashes or
underscores) and whose values become the defaults of those flags.
Flags given on the command line still win. A nested mapping named after
a verb applies to that verb only and overrides the shared keys:

    data: corpus.fvecs
    k: 10
    seed: 7
    autotune:
      target: recall=0.9
      out: tuned.idx

On/off flags are accepted under their flag name or their destination,
so 'no-shared-levels: true' and 'shared-levels: false' mean the same.
"""
import argparse
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

# Local Imports
from autoforest.utils import logger


def _normalize(key: str) -> str:
    return str(key).strip().lstrip("-").replace("-", "_")


def _accepted_keys(
    actions: Iterable[argparse.Action],
) -> Dict[str, Tuple[str, Optional[argparse.Action]]]:
    """Map every accepted key to its destination.

    Keys spelled after an option string that differs from the destination
    also carry the action, to translate on/off flags.
    """
    keys = {}
    for action in actions:
        if action.dest == argparse.SUPPRESS:
            continue
        keys[action.dest] = (action.dest, None)
        for option in action.option_strings:
            name = _normalize(option)
            if name != action.dest:
                keys.setdefault(name, (action.dest, action))
    return keys


def _resolve(name: str, value: Any, action: Optional[argparse.Action], path: str):
    if action is None or action.nargs != 0 or action.const is None:
        return value
    if not isinstance(value, bool):
        raise ValueError(
            "Option '{}' in {} takes true or false, got {!r}.".format(name, path, value)
        )
    return action.const if value else action.default


def load_run_file(
    path: str, verb: str, actions: Iterable[argparse.Action], verbs: Iterable[str]
) -> Dict[str, Any]:
    """Return the defaults the run file at 'path' sets for 'verb'.

    'actions' are the argparse actions of the verb's parser; the result
    is keyed by their destinations.

    Raises ValueError for a malformed file or for a key that is not a
    flag of 'verb'. Sections of other verbs are ignored.
    """
    with open(path, "r") as stm:
        try:
            content = yaml.safe_load(stm)
        except yaml.YAMLError as exc:
            raise ValueError("Cannot parse run file {}: {}".format(path, exc)) from exc
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ValueError("Run file {} must hold a mapping.".format(path))

    verbs = set(verbs)
    shared = {}
    section = {}
    for key, value in content.items():
        name = _normalize(key)
        if name in verbs:
            if name != verb:
                continue
            if not isinstance(value, dict):
                raise ValueError("Section '{}' of {} must be a mapping.".format(name, path))
            section = {_normalize(k): v for k, v in value.items()}
        else:
            shared[name] = value

    known = _accepted_keys(actions)
    defaults = {}
    for name, value in list(shared.items()) + list(section.items()):
        if name not in known:
            # Shared keys may belong to other verbs; section keys may not.
            if name in section:
                raise ValueError("Unknown option '{}' for '{}' in {}.".format(name, verb, path))
            logger.debug("Run file key '%s' does not apply to '%s'.", name, verb)
            continue
        dest, action = known[name]
        defaults[dest] = _resolve(name, value, action, path)
    return defaults
