#!/usr/bin/env python3
"""Writes corpus.jsonl: labeled household-agent transcripts for the bias analyzer.

Each (task, model) group gets successful initial episodes around a baseline.
Failures are refinement episodes whose distinguishing feature is drawn from the
failed/normal ratio bands of the quantitative table (think count 1.6-2.9x,
prompt length 4.4-6.1x, output length 1.7-3.1x), so some of them land below the
classifier's thresholds. Every line records the counts the generator inserted
under "expected" for exact checks.

Usage: python3 make_corpus.py > corpus.jsonl
"""

import json
import random

SEED = 20240917
PATTERN_COUNTS = {"overthinking": 9, "cognitive_overload": 17, "perfectionism": 25}

MODELS = {
    # think steps, action steps, prompt characters of a normal episode
    "o1-mini": (5, 8, 203),
    "gpt-4o": (3, 6, 239),
    "gpt-3.5-turbo": (6, 7, 260),
}
TASKS = {
    "put-two-pillow": ("pillow", "sofa 1", ["armchair 1", "sidetable 1", "shelf 2"]),
    "clean-cloth": ("cloth", "countertop 1", ["cabinet 1", "cabinet 2", "toilet 1"]),
    "clean-soapbar": ("soapbar", "cabinet 1", ["countertop 1", "sinkbasin 1", "toilet 1"]),
}

FILLER = (
    "You are in the middle of a room. Looking quickly around you, you see a cabinet 4, a cabinet 3, "
    "a cabinet 2, a cabinet 1, a countertop 1, a garbagecan 1, a handtowelholder 2, a sinkbasin 1, "
    "a toilet 1, and a towelholder 1. Your memory for the task below: in the previous attempt I "
    "checked each location one by one and used in/on for every put action. "
)


def prompt_of(length, rng):
    start = rng.randrange(len(FILLER))
    text = (FILLER * (length // len(FILLER) + 3))[start:start + length]
    return text


class Log:
    def __init__(self, rng, style):
        self.rng = rng
        self.style = style  # "tagged" or "prompt"
        self.lines = []
        self.thinks = 0
        self.actions = 0

    def think(self, text):
        self.thinks += 1
        self.lines.append(("LLM: " if self.style == "tagged" else "") + "think: " + text)
        self.observe("OK.")

    def act(self, text, reply):
        self.actions += 1
        self.lines.append(("LLM: " if self.style == "tagged" else "> ") + text)
        self.observe(reply)

    def observe(self, text):
        self.lines.append(("Environment: " if self.style == "tagged" else "") + text)

    def text(self, status):
        self.observe("STATUS: " + status)
        return "\n".join(self.lines) + "\n"


THOUGHTS = [
    "To solve the task, I need to find the {obj}, then put it in/on {dst}.",
    "A {obj} is more likely to appear in {src}. I can check one by one.",
    "Now I have the {obj}. Next, I need to put it in/on {dst}.",
    "I should double check that the {obj} is really there before moving on.",
    "Let me reconsider the plan once more to be careful.",
    "Maybe I should verify every location again before acting.",
]


def episode(task, thinks, actions, rng, style, noop_loop=0, noop_action=None, batching=0):
    """Interleaves think steps with actions; optional no-op loop and failed batching attempts."""
    obj, dst, sources = TASKS[task]
    log = Log(rng, style)
    slots = sorted(rng.sample(range(actions + thinks), thinks)) if thinks else []
    plain = actions - noop_loop - batching
    done_plain = 0
    t = 0
    for pos in range(actions + thinks):
        if t < len(slots) and slots[t] == pos:
            log.think(THOUGHTS[t % len(THOUGHTS)].format(obj=obj, dst=dst, src=sources[t % len(sources)]))
            t += 1
            continue
        if done_plain < plain:
            normal_actions_step(log, task, done_plain)
            done_plain += 1
        elif batching:
            batching -= 1
            log.act(f"take {obj} 1 and {obj} 2 from {sources[0]}", "Nothing happens.")
            log.act(f"go to {dst}", f"On the {dst}, you see a creditcard 1.")
        elif noop_loop:
            noop_loop -= 1
            log.act(noop_action, "Nothing happens.")
    return log


def normal_actions_step(log, task, i):
    obj, dst, sources = TASKS[task]
    src = sources[(i // 4) % len(sources)]
    kind = i % 4
    if kind == 0:
        log.act(f"go to {src}", f"On the {src}, you see a {obj} {i // 4 + 1}.")
    elif kind == 1:
        log.act(f"take {obj} {i // 4 + 1} from {src}", f"You pick up the {obj} {i // 4 + 1} from the {src}.")
    elif kind == 2:
        log.act(f"go to {dst}", f"On the {dst}, you see a creditcard 1.")
    else:
        log.act(f"put {obj} {i // 4 + 1} in/on {dst}", f"You put the {obj} {i // 4 + 1} in/on the {dst}.")


def record(task, model, ep, phase, prompt, log_text, status, label, thinks, actions, noop):
    return {
        "task": task,
        "model": model,
        "episode": ep,
        "phase": phase,
        "prompt": prompt,
        "log": log_text,
        "status": status,
        "label": label,
        "expected": {"think_count": thinks, "output_len": thinks + actions, "noop_loop_len": noop,
                     "prompt_len": len(prompt)},
    }


def main():
    rng = random.Random(SEED)
    groups = [(t, m) for t in TASKS for m in MODELS]
    out = []
    labels = [p for p, n in PATTERN_COUNTS.items() for _ in range(n)]
    rng.shuffle(labels)

    def add_initial(task, model, ep):
        b_t, b_a, b_p = MODELS[model]
        th = max(1, b_t + rng.randint(-1, 1))
        ac = max(2, b_a + rng.randint(-1, 1))
        prompt = prompt_of(b_p + rng.randint(-10, 10), rng)
        log = episode(task, th, ac, rng, rng.choice(["tagged", "prompt"]))
        out.append(record(task, model, ep, "initial", prompt, log.text("OK"), "success", None, th, ac, 0))

    for task, model in groups:
        for k in range(3):
            add_initial(task, model, f"{task}/{model}/base{k}")

    for i, label in enumerate(labels):
        task, model = groups[i % len(groups)]
        b_t, b_a, b_p = MODELS[model]
        ep = f"{task}/{model}/f{i:02d}"
        add_initial(task, model, ep)
        style = rng.choice(["tagged", "prompt"])
        noop = 0
        noop_action = None
        batching = 0
        if label == "overthinking":
            th = max(1, round(b_t * rng.uniform(1.6, 2.9)))
            ac = max(2, round(b_a * rng.uniform(0.5, 0.9)))
            plen = round(b_p * rng.uniform(1.5, 2.8))
        elif label == "cognitive_overload":
            th = max(1, round(b_t * rng.uniform(0.8, 1.2)))
            noop = rng.choice([2, 2, 3])
            ac = b_a + noop
            plen = round(b_p * rng.uniform(4.4, 6.1))
            obj, dst, _ = TASKS[task]
            noop_action = f"put {obj} 1 in {dst}"
        else:
            th = max(1, round(b_t * rng.uniform(0.8, 1.3)))
            target = round((b_t + b_a) * rng.uniform(1.7, 3.1))
            ac = max(b_a, target - th)
            batching = 1
            plen = round(b_p * rng.uniform(1.5, 2.8))
        prompt = prompt_of(plen, rng)
        log = episode(task, th, ac, rng, style, noop_loop=noop, noop_action=noop_action, batching=batching)
        # A batching attempt emits two actions: the rejected one and a "go to".
        out.append(record(task, model, ep, "refinement", prompt, log.text("FAIL"), "fail", label, th, log.actions,
                          max(noop, batching)))

    for r in out:
        print(json.dumps(r, ensure_ascii=False, sort_keys=True))


if __name__ == "__main__":
    main()
