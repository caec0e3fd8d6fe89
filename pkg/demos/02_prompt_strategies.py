"""The four text-to-image prompt strategies, from raw text to LLM rewrite.

Run: python3 demos/02_prompt_strategies.py
"""

from t2ifuse.corpus import TextSample
from t2ifuse.prompting import NEGATIVE_PROMPT, StubChatClient, build_prompt, extract_keywords

REVIEW = (
    "This new coffee machine is absolutely fantastic! It brews a perfect cup "
    "every time, is super easy to clean, and its sleek black design looks "
    "stunning on my kitchen counter. Definitely a 5-star product."
)
sample = TextSample(id="demo-1", text=REVIEW, label=0)

print("source text:")
print(f"  {REVIEW}\n")

print("extracted keyword phrases:")
for phrase in extract_keywords(REVIEW):
    print(f"  - {phrase}")
print()

# An offline stand-in for a chat model; a real deployment points
# HttpChatClient at a completion endpoint instead.
elaborator = StubChatClient(
    response=(
        "A gleaming black coffee machine on a marble counter, morning light, "
        "steam rising from a fresh cup, photorealistic, magazine quality."
    )
)

for strategy in ("direct", "keyword", "stylized", "elaborated"):
    spec = build_prompt(
        sample, strategy, task_id="sentiment", elaborator=elaborator
    )
    print(f"[{strategy}]")
    print(f"  positive: {spec.positive[:110]}{'...' if len(spec.positive) > 110 else ''}")
    if spec.style_tags:
        print(f"  style tags: {', '.join(spec.style_tags)}")
    print()

print("universal negative prompt (attached to every request):")
print(f"  {NEGATIVE_PROMPT}")
