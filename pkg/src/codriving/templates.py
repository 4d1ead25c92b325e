"""Fixed English text used in scene descriptions, prompts and memory feedback.

Bump TEMPLATE_VERSION whenever any string here changes: stored memories are
embedded from rendered text, so retrieval quality depends on stable wording.
The golden-file test in tests/ pins the rendered output.
"""

TEMPLATE_VERSION = 1

NO_VEHICLES = "There are no surrounding vehicles."
NO_CONFLICTS = "No conflicts require negotiation."
NO_MEMORY = "No prior experience is available for this situation."

SECTION_SCENE = "## Scene"
SECTION_NEGOTIATION = "## Negotiation"
SECTION_MEMORIES = "## Memories"
SECTION_ACTIONS = "## Allowed actions"
SECTION_OUTPUT = "## Output format"
SECTIONS = (SECTION_SCENE, SECTION_NEGOTIATION, SECTION_MEMORIES, SECTION_ACTIONS, SECTION_OUTPUT)

SYSTEM_TEXT = (
    "You are the decision module of a connected automated vehicle driving in mixed traffic. "
    "Reason step by step: read the scene, respect the negotiated passing order unless it is unsafe, "
    "learn from the listed experiences, and pick exactly one of the allowed actions. "
    "Each speed action changes the target speed by {dv_step:.1f} m/s."
)

OUTPUT_CONTRACT = (
    'Reply with "Decision: <ACTION>" on the first line, where <ACTION> is one of: {actions}. '
    "Then give a one-line rationale."
)
REPROMPT = 'Your reply could not be parsed. Answer with exactly one line "Decision: <ACTION>" using one of: {actions}.'

YOU_YIELD = "You yield to vehicle {other}"
YOU_FIRST = "You pass before vehicle {other}"

FEEDBACK_NEGATIVE = "Your action has intensified the conflict; similar actions should be avoided."
FEEDBACK_IMPROVED = "Your action has eased the conflict; similar actions are recommended in similar situations."
FEEDBACK_MAINTAINED = "Your action maintained safety; similar actions are acceptable in similar situations."

COORDINATOR_SYSTEM = (
    "You are the conflict coordinator of a cooperative driving system. For each proposed passing "
    'order answer one line "Pair <n>: confirm" or "Pair <n>: swap".'
)
