use super::{GCoTResponse, GcotError};

/// Finds the byte range of marker `"{n}."` at or after `from`.
///
/// With `line_start` the marker must open a line (after optional
/// indentation); otherwise it only has to follow whitespace. In both cases
/// the marker must be followed by whitespace or end of text.
fn find_marker(text: &str, n: u8, from: usize, line_start: bool) -> Option<(usize, usize)> {
    let marker = format!("{n}.");
    let mut search = from;
    while let Some(rel) = text[search..].find(&marker) {
        let at = search + rel;
        let end = at + marker.len();
        let before = &text[..at];
        let opens = if line_start {
            before
                .rsplit('\n')
                .next()
                .is_some_and(|l| l.chars().all(char::is_whitespace))
        } else {
            before.chars().next_back().is_none_or(char::is_whitespace)
        };
        let closes = text[end..].chars().next().is_none_or(char::is_whitespace);
        if opens && closes {
            return Some((at, end));
        }
        search = end;
    }
    None
}

fn split_steps(raw: &str, line_start: bool) -> Option<[String; 3]> {
    let (_, s1_end) = find_marker(raw, 1, 0, line_start)?;
    let (s2_at, s2_end) = find_marker(raw, 2, s1_end, line_start)?;
    let step3 = find_marker(raw, 3, s2_end, line_start);
    let step_two_stop = step3.map_or(raw.len(), |(at, _)| at);
    Some([
        raw[s1_end..s2_at].trim().to_owned(),
        raw[s2_end..step_two_stop].trim().to_owned(),
        step3.map(|(_, end)| raw[end..].trim().to_owned()).unwrap_or_default(),
    ])
}

/// Splits a raw LLM reply into its numbered steps.
///
/// Line-anchored markers win; a reply that puts all steps on one line is
/// split on inline markers instead. The returned response has an empty
/// `final_sentence`; see [`GCoTResponse::with_answer`].
pub fn parse_gcot_reply(raw: &str) -> Result<GCoTResponse, GcotError> {
    let steps = split_steps(raw, true)
        .filter(|s| !s[0].is_empty() && !s[1].is_empty())
        .or_else(|| split_steps(raw, false));
    let Some([describe, locate, reason]) = steps else {
        let which = if find_marker(raw, 1, 0, false).is_none() { 1 } else { 2 };
        return Err(GcotError::Parse(format!("step {which} missing")));
    };
    if describe.is_empty() {
        return Err(GcotError::Parse("step 1 is empty".into()));
    }
    if locate.is_empty() {
        return Err(GcotError::Parse("step 2 is empty".into()));
    }
    Ok(GCoTResponse {
        step_describe: describe,
        step_locate: locate,
        step_reason: reason,
        final_sentence: String::new(),
    })
}

/// Renders the steps the way the LLM is asked to produce them.
pub fn render_steps(g: &GCoTResponse) -> String {
    let mut out = format!("1. {}\n2. {}", g.step_describe, g.step_locate);
    if !g.step_reason.is_empty() {
        out.push_str("\n3. ");
        out.push_str(&g.step_reason);
    }
    out
}

pub fn final_sentence(answer: &str) -> String {
    format!("So the answer is {answer}.")
}

/// Non-empty steps joined by single spaces, then the closing sentence.
pub fn finalize_response(g: &GCoTResponse, answer: &str) -> String {
    let mut parts: Vec<&str> = [&g.step_describe, &g.step_locate, &g.step_reason]
        .into_iter()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect();
    let closing = final_sentence(answer);
    parts.push(&closing);
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SURFBOARD_OUTPUT: &str = "1. The picture shows a man carrying a surfboard across a sandy beach.\n\
2. So the sporting equipment in question should refer to the surfboard.\n\
3. In 1926 an American surfer named Tom Blake (1902 - 1994) invented the very first, hollow surfboard.";

    #[test]
    fn parses_three_steps() {
        let g = parse_gcot_reply(SURFBOARD_OUTPUT).unwrap();
        assert_eq!(g.step_describe, "The picture shows a man carrying a surfboard across a sandy beach.");
        assert_eq!(g.step_locate, "So the sporting equipment in question should refer to the surfboard.");
        assert!(g.step_reason.starts_with("In 1926 an American surfer"));
        assert!(g.step_reason.ends_with("hollow surfboard."));
    }

    #[test]
    fn parses_inline_steps() {
        let g = parse_gcot_reply(&SURFBOARD_OUTPUT.replace('\n', " ")).unwrap();
        assert_eq!(g.step_locate, "So the sporting equipment in question should refer to the surfboard.");
        assert!(g.step_reason.contains("(1902 - 1994)"));
    }

    #[test]
    fn optional_third_step() {
        let g = parse_gcot_reply("1. A brown bear sits on grass.\n2. The bear is at [0.1, 0.2, 0.5, 0.9].").unwrap();
        assert_eq!(g.step_reason, "");
    }

    #[test]
    fn missing_second_step_is_an_error() {
        let err = parse_gcot_reply("1. A bear.\n3. Because.").unwrap_err();
        assert!(matches!(err, GcotError::Parse(ref m) if m.contains("step 2")));
        assert!(parse_gcot_reply("no numbering at all").is_err());
        assert!(parse_gcot_reply("1.\n2. only the second").is_err());
    }

    #[test]
    fn ignores_numbers_inside_sentences() {
        let g = parse_gcot_reply("1. Version 1.5 of the scene has 2.5 cars.\n2. The car at [0.1, 0.2, 0.3, 0.4].").unwrap();
        assert_eq!(g.step_describe, "Version 1.5 of the scene has 2.5 cars.");
    }

    #[test]
    fn finalize_surfboard() {
        let g = parse_gcot_reply(SURFBOARD_OUTPUT).unwrap();
        let text = finalize_response(&g, "1926");
        assert!(text.ends_with("hollow surfboard. So the answer is 1926."));
        assert!(text.starts_with("The picture shows a man"));
    }

    #[test]
    fn finalize_two_steps() {
        let g = GCoTResponse {
            step_describe: "A bear.".into(),
            step_locate: "The bear is at [0.1, 0.1, 0.4, 0.4].".into(),
            step_reason: String::new(),
            final_sentence: String::new(),
        };
        assert_eq!(
            finalize_response(&g, "brown"),
            "A bear. The bear is at [0.1, 0.1, 0.4, 0.4]. So the answer is brown."
        );
    }

    fn sentence() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z ,;()'-]{0,40}[a-z][.!?]"
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(a in sentence(), b in sentence(), c in proptest::option::of(sentence())) {
            let g = GCoTResponse {
                step_describe: a,
                step_locate: b,
                step_reason: c.unwrap_or_default(),
                final_sentence: String::new(),
            };
            let parsed = parse_gcot_reply(&render_steps(&g)).unwrap();
            prop_assert_eq!(parsed, g);
        }

        #[test]
        fn finalized_text_ends_with_answer(a in sentence(), b in sentence(), answer in "[^\n]{1,20}") {
            let g = GCoTResponse { step_describe: a, step_locate: b, step_reason: String::new(), final_sentence: String::new() };
            let expected = format!("So the answer is {}.", answer);
            prop_assert!(finalize_response(&g, &answer).ends_with(&expected));
        }
    }
}
