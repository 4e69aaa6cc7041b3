//! Deterministic plain-text rendering of alert emails.

use base64::Engine;
use chrono::SecondsFormat;

use super::{Alert, AlertKind};
use crate::model::EmergencyContact;

pub const SUBJECT_PREFIX: &str = "[SafeSpace ALERT]";
pub const LOCATION_UNAVAILABLE: &str = "location unavailable";

/// A rendered message. Stored with LF line endings; [`MimeMessage::to_wire`]
/// produces the CRLF form for SMTP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MimeMessage {
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl MimeMessage {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Headers, blank line, body; LF line endings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for (name, value) in &self.headers {
            out.push_str(name);
            out.push_str(": ");
            out.push_str(value);
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.body);
        out.into_bytes()
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let lf = self.to_bytes();
        let mut out = Vec::with_capacity(lf.len() + lf.len() / 40);
        for b in lf {
            if b == b'\n' {
                out.push(b'\r');
            }
            out.push(b);
        }
        out
    }
}

pub fn map_link(latitude: f64, longitude: f64) -> String {
    format!("https://maps.google.com/?q={latitude:.6},{longitude:.6}")
}

fn single_line(s: &str) -> String {
    s.chars().map(|c| if c == '\r' || c == '\n' { ' ' } else { c }).collect()
}

fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n")
}

/// RFC 2047 encoding for header text that is not plain ASCII. Words are kept
/// under the 75-character limit and split on character boundaries.
fn encode_header_text(s: &str) -> String {
    if s.is_ascii() {
        return s.to_string();
    }
    let mut words = Vec::new();
    let mut chunk = String::new();
    for c in s.chars() {
        if chunk.len() + c.len_utf8() > 45 {
            words.push(std::mem::take(&mut chunk));
        }
        chunk.push(c);
    }
    if !chunk.is_empty() {
        words.push(chunk);
    }
    words
        .iter()
        .map(|w| format!("=?UTF-8?B?{}?=", base64::engine::general_purpose::STANDARD.encode(w)))
        .collect::<Vec<_>>()
        .join("\n ")
}

fn mailbox(name: &str, email: &str) -> String {
    let name = single_line(name);
    if name.is_ascii() {
        let escaped = name.replace('\\', "\\\\").replace('"', "\\\"");
        format!("\"{escaped}\" <{email}>")
    } else {
        format!("{} <{email}>", encode_header_text(&name))
    }
}

pub fn subject(kind: AlertKind, user_display_name: &str) -> String {
    format!("{SUBJECT_PREFIX} {} \u{2014} {}", kind.label(), single_line(user_display_name))
}

/// Body text of an alert. Pure: identical inputs give identical text.
pub fn render_body(alert: &Alert, user_display_name: &str) -> String {
    let name = single_line(user_display_name);
    let mut b = String::new();
    match alert.kind {
        AlertKind::Sos => {
            b.push_str(&format!("{name} triggered an SOS alert and may need help.\n"));
        }
        AlertKind::MissedCheckIn => {
            let due = alert
                .deadline
                .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
                .unwrap_or_else(|| "an unknown time".into());
            b.push_str(&format!("{name} missed a scheduled safety check-in due at {due}.\n"));
        }
    }
    b.push('\n');
    b.push_str(&format!("Alert type: {}\n", alert.kind.label()));
    b.push_str(&format!("Person: {name}\n"));
    b.push_str(&format!(
        "Time (UTC): {}\n",
        alert.created_at.to_rfc3339_opts(SecondsFormat::Secs, true)
    ));
    match &alert.location {
        Some(loc) => {
            b.push_str(&format!("Location: {:.6}, {:.6}\n", loc.latitude, loc.longitude));
            if let Some(acc) = loc.accuracy_m {
                b.push_str(&format!("Accuracy: {acc:.0} m\n"));
            }
            b.push_str(&format!(
                "Location captured at (UTC): {}\n",
                loc.captured_at.to_rfc3339_opts(SecondsFormat::Secs, true)
            ));
            b.push_str(&format!("Map: {}\n", map_link(loc.latitude, loc.longitude)));
        }
        None => b.push_str(&format!("Location: {LOCATION_UNAVAILABLE}\n")),
    }
    if let Some(note) = alert.note.as_deref().filter(|n| !n.trim().is_empty()) {
        b.push_str(&format!("Note from {name}:\n{}\n", normalize_newlines(note.trim_end())));
    }
    b.push('\n');
    b.push_str(&format!("Alert reference: {}\n", alert.alert_id));
    b.push_str(&format!(
        "You are receiving this because {name} listed you as an emergency contact in SafeSpace.\n\
         Please try to reach them directly. If you believe they are in danger, contact local emergency services.\n"
    ));
    b
}

/// Full message for one contact. The body is the alert's rendered message.
pub fn format_alert(alert: &Alert, user_display_name: &str, contact: &EmergencyContact, sender: &str) -> MimeMessage {
    let domain = sender.rsplit_once('@').map_or("safespace.invalid", |(_, d)| d);
    let headers = vec![
        ("From".to_string(), format!("SafeSpace Alerts <{sender}>")),
        ("To".to_string(), mailbox(&contact.name, &contact.email)),
        (
            "Subject".to_string(),
            encode_header_text(&subject(alert.kind, user_display_name)),
        ),
        ("Date".to_string(), alert.created_at.to_rfc2822()),
        (
            "Message-ID".to_string(),
            format!("<{}.{}@{domain}>", alert.alert_id, contact.contact_id),
        ),
        ("X-SafeSpace-Alert-Id".to_string(), alert.alert_id.to_string()),
        ("MIME-Version".to_string(), "1.0".to_string()),
        ("Content-Type".to_string(), "text/plain; charset=utf-8".to_string()),
        ("Content-Transfer-Encoding".to_string(), "8bit".to_string()),
    ];
    MimeMessage {
        headers,
        body: normalize_newlines(&alert.message),
    }
}
