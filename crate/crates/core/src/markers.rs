//! Marker tokens: `MARK:<segment>(:<segment>)*`, segments drawn from
//! `[A-Za-z0-9_-]`. Synthetic corpora embed one unique marker per fragment
//! so content provenance can be checked byte-exactly.

pub const PREFIX: &[u8] = b"MARK:";

fn is_segment_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'-'
}

/// Markers found in `bytes`, deduplicated, in order of first appearance.
pub fn extract_markers(bytes: &[u8]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i + PREFIX.len() <= bytes.len() {
        if &bytes[i..i + PREFIX.len()] != PREFIX {
            i += 1;
            continue;
        }
        let mut end = i + PREFIX.len();
        let mut segment_start = end;
        loop {
            while end < bytes.len() && is_segment_byte(bytes[end]) {
                end += 1;
            }
            if end == segment_start {
                // empty segment: back off to before the dangling ':'
                end = segment_start.saturating_sub(1);
                break;
            }
            if end + 1 < bytes.len() && bytes[end] == b':' && is_segment_byte(bytes[end + 1]) {
                end += 1;
                segment_start = end;
            } else {
                break;
            }
        }
        if end > i + PREFIX.len() {
            let token = String::from_utf8(bytes[i..end].to_vec()).expect("ascii");
            if !out.contains(&token) {
                out.push(token);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

pub fn contains_marker(bytes: &[u8], marker: &str) -> bool {
    extract_markers(bytes).iter().any(|m| m == marker)
}
