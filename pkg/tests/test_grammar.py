from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelpilot.grammar import (
    GRAMMAR_ACTIONS,
    MODEL,
    PIXEL,
    BadArguments,
    BadDirection,
    Click,
    DoubleClick,
    Drag,
    Finished,
    GrammarError,
    Hotkey,
    MalformedOutput,
    Navigate,
    NonPositiveExtent,
    Point,
    RightClick,
    Scroll,
    SpaceMismatch,
    TooManyHotkeys,
    Type,
    UnknownAction,
    Wait,
    escape,
    format_model_turn,
    parse_action,
    parse_model_output,
    scale_action,
    scale_point,
    serialize_action,
    to_model_space,
    unescape,
)
from strategies import actions


def test_model_output_with_thought():
    turn = parse_model_output("Thought: find login\nAction: click(point='<point>200 300</point>')")
    assert turn.thought == "find login"
    assert turn.action == Click(Point(200, 300, MODEL))


def test_stuck_is_a_valid_turn():
    turn = parse_model_output("Thought: done\nAction: finished(content='STUCK')")
    assert turn.action == Finished("STUCK")


def test_unknown_action_name():
    with pytest.raises(UnknownAction):
        parse_model_output("Action: fly(point='<point>1 1</point>')")


def test_missing_action_label():
    with pytest.raises(MalformedOutput):
        parse_model_output("I would click the button")


def test_first_well_formed_action_wins():
    text = "Thought: a\nAction: fly()\nThought: b\nAction: wait()\nAction: click(point='<point>1 2</point>')"
    turn = parse_model_output(text)
    assert turn.action == Wait()
    assert turn.thought == "b"


def test_code_fence_around_reply():
    text = "```\nThought: look\nAction: scroll(point='<point>5 5</point>', direction='up')\n```"
    turn = parse_model_output(text)
    assert turn.action == Scroll(Point(5, 5), "up")


@pytest.mark.parametrize(
    "text,expected",
    [
        ("hotkey(key='ctrl c')", Hotkey(("ctrl", "c"))),
        ("scroll(point='<point>10 20</point>', direction='down')", Scroll(Point(10, 20), "down")),
        ("type(content='a\\nb')", Type("a\nb")),
        ("left_double(point='<point>3 4</point>')", DoubleClick(Point(3, 4))),
        ("right_single(point='<point>3 4</point>')", RightClick(Point(3, 4))),
        ("drag(start_point='<point>1 2</point>', end_point='<point>3 4</point>')", Drag(Point(1, 2), Point(3, 4))),
        ("wait()", Wait()),
        ("finished()", Finished("")),
        ("click(start_box='(10,20)')", Click(Point(10, 20))),
        ("click(point='<point>10.5 19.4</point>')", Click(Point(11, 19))),
        ("click(point='<bbox>10 20 30 40</bbox>')", Click(Point(20, 30))),
        ("left_single(point='<point>1 1</point>')", Click(Point(1, 1))),
        ("type(content='it's fine')", Type("it's fine")),
        ("type(content=\"say \\\"hi\\\"\")", Type('say "hi"')),
    ],
)
def test_parse_action(text, expected):
    assert parse_action(text) == expected


@pytest.mark.parametrize(
    "text,error",
    [
        ("hotkey(key='ctrl shift alt k')", TooManyHotkeys),
        ("scroll(point='<point>1 1</point>', direction='sideways')", BadDirection),
        ("click()", BadArguments),
        ("click(point='<point>1</point>')", BadArguments),
        ("click(point='<point>-1 5</point>')", BadArguments),
        ("click(point='<point>1 1</point>', extra='x')", BadArguments),
        ("click(point='<point>1 1</point>') trailing", BadArguments),
        ("type(content='unterminated", BadArguments),
        ("navigate(url='https://a.test')", UnknownAction),
        ("", MalformedOutput),
    ],
)
def test_parse_action_errors(text, error):
    with pytest.raises(error):
        parse_action(text)


def test_navigate_is_engine_only():
    assert parse_action("navigate(url='https://a.test')", allow_engine=True) == Navigate("https://a.test")


@pytest.mark.parametrize(
    "action,text",
    [
        (Click(Point(5, 7)), "click(point='<point>5 7</point>')"),
        (Type("x\n"), "type(content='x\\n')"),
        (Wait(), "wait()"),
        (Hotkey(("ctrl", "c")), "hotkey(key='ctrl c')"),
        (Finished("it's"), "finished(content='it\\'s')"),
        (Navigate("https://a.test/"), "navigate(url='https://a.test/')"),
    ],
)
def test_serialize(action, text):
    assert serialize_action(action) == text


def test_every_wire_action_has_a_form():
    assert set(GRAMMAR_ACTIONS) == {
        "click", "left_double", "right_single", "drag", "hotkey", "type", "scroll", "wait", "finished"
    }


@pytest.mark.parametrize("keys", [(), ("Ctrl",), ("a b",), ("",)])
def test_bad_hotkeys(keys):
    with pytest.raises(BadArguments):
        Hotkey(keys)


def test_escape_round_trip_examples():
    assert escape("a'b\"c\\d\ne\tf\rg") == "a\\'b\\\"c\\\\d\\ne\\tf\\rg"
    assert unescape("\\q") == "\\q"


@given(st.text())
def test_unescape_inverts_escape(s):
    assert unescape(escape(s)) == s


@settings(max_examples=300)
@given(actions)
def test_round_trip(action):
    assert parse_action(serialize_action(action)) == action


@settings(max_examples=300)
@given(st.text(), actions)
def test_model_turn_round_trip(thought, action):
    thought = " ".join(thought.replace("Action", "").replace("Thought", "").replace("`", "").split())
    turn = parse_model_output(format_model_turn(thought, action))
    assert turn.action == action
    assert turn.thought == thought


@settings(max_examples=500)
@given(st.text(max_size=80))
def test_parser_only_raises_typed_errors(text):
    for fn in (parse_action, parse_model_output):
        try:
            fn(text)
        except GrammarError:
            pass


# -- coordinates --

def _oracle_scale(v, src, dst):
    # exact rational value, rounded half up, then clamped
    q = Fraction(v * dst, src)
    r = int(q) + (1 if q - int(q) >= Fraction(1, 2) else 0)
    return min(max(r, 0), dst - 1)


@pytest.mark.parametrize(
    "p,extent,viewport,expected",
    [
        (Point(0, 0), (1000, 1000), (1280, 800), (0, 0)),
        (Point(0, 0), (7, 3), (11, 13), (0, 0)),
        (Point(1000, 1000), (1000, 1000), (1280, 800), (1279, 799)),
        (Point(500, 500), (1000, 1000), (1000, 1000), (500, 500)),
    ],
)
def test_scale_point_examples(p, extent, viewport, expected):
    q = scale_point(p, extent, viewport)
    assert (q.x, q.y, q.space) == (*expected, PIXEL)


@given(
    st.integers(0, 5000), st.integers(0, 5000),
    st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 4000), st.integers(1, 4000),
)
def test_scale_point_matches_oracle(x, y, mw, mh, vw, vh):
    q = scale_point(Point(x, y), (mw, mh), (vw, vh))
    assert (q.x, q.y) == (_oracle_scale(x, mw, vw), _oracle_scale(y, mh, vh))


@given(st.integers(0, 1000), st.integers(0, 1000))
def test_scale_point_monotone_in_x(a, b):
    lo, hi = sorted((a, b))
    assert scale_point(Point(lo, 0)).x <= scale_point(Point(hi, 0)).x


def test_scale_point_rejects_pixel_input():
    with pytest.raises(SpaceMismatch):
        scale_point(Point(1, 1, PIXEL))


@pytest.mark.parametrize("extent,viewport", [((0, 10), (10, 10)), ((10, 10), (10, -1))])
def test_non_positive_extent(extent, viewport):
    with pytest.raises(NonPositiveExtent):
        scale_point(Point(1, 1), extent, viewport)


def test_to_model_space_inverts_identity_scaling():
    assert to_model_space(150, 150, (1000, 1000)) == Point(150, 150)
    assert to_model_space(5000, -3, (1000, 1000)) == Point(1000, 0)


def test_scale_action_leaves_pixel_points():
    a = Drag(Point(500, 500), Point(3, 3, PIXEL))
    assert scale_action(a, (1000, 1000), (200, 100)) == Drag(Point(100, 50, PIXEL), Point(3, 3, PIXEL))
    assert scale_action(Wait()) == Wait()
