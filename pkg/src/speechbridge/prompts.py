"""Instruction prompts placed between the speech segment and the
assistant tag, with reproducible uniform sampling.
"""

from __future__ import annotations

import json

import numpy as np

FIXED_PROMPT = "Transcribe speech to text."

LONG_PROMPT = (
    "Transcribe speech to text. Output the transcription directly without "
    "redundant content. Ensure that the output is not duplicated."
)

# Ten instruction paraphrases of the short prompt, used when a run asks
# for prompt-library mode instead of a single fixed string.
DEFAULT_PROMPTS = [
    FIXED_PROMPT,
    "Write down what is said in the speech.",
    "Convert the spoken words to written text.",
    "Listen to the speech and type the transcript.",
    "Please transcribe the audio into text.",
    "Turn this speech into a text transcript.",
    "Recognize the speech and output the words.",
    "Give the exact transcription of the utterance.",
    "Produce the transcript for the spoken input.",
    "Type out the words you hear in the speech.",
]


class PromptLibrary:
    """Ordered prompt list with a seeded uniform sampler."""

    def __init__(self, prompts, seed: int = 0):
        prompts = list(prompts)
        if not prompts:
            raise ValueError("prompt library must not be empty")
        self.prompts = prompts
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.prompts)

    def sample(self) -> str:
        return self.prompts[int(self._rng.integers(len(self.prompts)))]

    def pick(self, rng) -> str:
        """Draw with a caller-owned generator; lets the trainer derive
        draws statelessly so interrupted runs resume on the same prompts."""
        return self.prompts[int(rng.integers(len(self.prompts)))]

    def reset(self) -> None:
        self._rng = np.random.default_rng(self.seed)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"prompts": self.prompts}, f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path, seed: int = 0) -> "PromptLibrary":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if not isinstance(doc, dict) or "prompts" not in doc:
            raise ValueError(f"{path}: expected a JSON object with a 'prompts' list")
        return cls(doc["prompts"], seed=seed)


def sample_prompt(lib: PromptLibrary) -> str:
    """Uniform draw from the library's own generator."""
    return lib.sample()


def prompt_for_mode(mode: str, library: PromptLibrary | None = None):
    """Resolve a prompt-mode setting to a callable rng -> prompt string.

    Modes: "none" (empty prompt), "fixed" (the short default), any other
    string is used verbatim as a fixed prompt, and "library" samples.
    """
    if mode == "none":
        return lambda rng: ""
    if mode == "fixed":
        return lambda rng: FIXED_PROMPT
    if mode == "library":
        lib = library if library is not None else PromptLibrary(DEFAULT_PROMPTS)
        return lambda rng: lib.pick(rng)
    return lambda rng: mode
