use std::time::Duration;

use lettre::address::Envelope;
use lettre::transport::smtp::authentication::Credentials;
use lettre::transport::smtp::client::{Tls, TlsParameters};
use lettre::Transport;
use serde::{Deserialize, Serialize};

use super::{DeliveryOutcome, MailTransport, MimeMessage};

/// SMTP relay settings. Credentials are named by environment variable and
/// read once when the mailer is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmtpConfig {
    pub host: String,
    pub port: u16,
    /// Require STARTTLS. When false the connection is plain text, which is
    /// only appropriate for a local relay or test sink.
    pub starttls: bool,
    pub username_env: Option<String>,
    pub password_env: Option<String>,
    pub sender: String,
    pub timeout_s: u64,
}

impl Default for SmtpConfig {
    fn default() -> Self {
        Self {
            host: "localhost".into(),
            port: 587,
            starttls: true,
            username_env: None,
            password_env: None,
            sender: "alerts@safespace.invalid".into(),
            timeout_s: 10,
        }
    }
}

#[derive(Clone)]
pub struct SmtpMailer {
    transport: lettre::SmtpTransport,
    sender: lettre::Address,
}

impl SmtpMailer {
    pub fn new(config: &SmtpConfig) -> anyhow::Result<Self> {
        let sender: lettre::Address = config
            .sender
            .parse()
            .map_err(|e| anyhow::anyhow!("invalid sender address {:?}: {e}", config.sender))?;
        let mut builder = lettre::SmtpTransport::builder_dangerous(config.host.as_str())
            .port(config.port)
            .timeout(Some(Duration::from_secs(config.timeout_s.max(1))));
        builder = if config.starttls {
            builder.tls(Tls::Required(TlsParameters::new(config.host.clone())?))
        } else {
            builder.tls(Tls::None)
        };
        if let (Some(user_var), Some(pass_var)) = (&config.username_env, &config.password_env) {
            let user = std::env::var(user_var).map_err(|_| anyhow::anyhow!("environment variable {user_var} is not set"))?;
            let pass = std::env::var(pass_var).map_err(|_| anyhow::anyhow!("environment variable {pass_var} is not set"))?;
            builder = builder.credentials(Credentials::new(user, pass));
        }
        Ok(Self {
            transport: builder.build(),
            sender,
        })
    }
}

impl MailTransport for SmtpMailer {
    fn send(&self, message: &MimeMessage, recipient: &str) -> DeliveryOutcome {
        let to: lettre::Address = match recipient.parse() {
            Ok(a) => a,
            Err(e) => return DeliveryOutcome::PermanentFailure(format!("invalid recipient: {e}")),
        };
        let envelope = match Envelope::new(Some(self.sender.clone()), vec![to]) {
            Ok(e) => e,
            Err(e) => return DeliveryOutcome::PermanentFailure(e.to_string()),
        };
        match self.transport.send_raw(&envelope, &message.to_wire()) {
            Ok(_) => DeliveryOutcome::Delivered,
            Err(e) => classify(&e),
        }
    }
}

/// 5xx replies are permanent; every other failure (4xx, timeouts, refused
/// or dropped connections) is worth retrying.
fn classify(e: &lettre::transport::smtp::Error) -> DeliveryOutcome {
    let text = match e.status() {
        Some(code) => format!("{code} {e}"),
        None => e.to_string(),
    };
    if e.is_permanent() {
        DeliveryOutcome::PermanentFailure(text)
    } else {
        DeliveryOutcome::TransientFailure(text)
    }
}
