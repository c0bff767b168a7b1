/// Splits an identifier into lower-cased subtokens on underscores, dots and
/// camel-case transitions. Never returns an empty sequence.
///
/// Acronym runs stay together (`HTTPServer` gives `http`, `server`) and
/// digits attach to the preceding word.
pub fn subtokenize(identifier: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in identifier.split(['_', '.']) {
        if part.is_empty() {
            continue;
        }
        let chars: Vec<char> = part.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let prev = chars[i - 1];
            let cur = chars[i];
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (cur.is_uppercase() && (prev.is_lowercase() || prev.is_ascii_digit()))
                || (cur.is_uppercase() && prev.is_uppercase() && next_lower);
            if boundary {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    if out.is_empty() {
        out.push(identifier.to_lowercase());
    }
    out
}
