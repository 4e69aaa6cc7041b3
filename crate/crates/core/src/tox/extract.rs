use std::io::Write;
use std::process::{Command, Stdio};

use super::ToxError;

/// Turns a screenshot into text.
pub trait TextExtractor: Send + Sync {
    fn extract(&self, image: &[u8]) -> Result<String, ToxError>;
}

/// Runs an external OCR program: image bytes on stdin, UTF-8 text on stdout,
/// exit status 0 on success. Stderr is discarded.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    program: String,
    args: Vec<String>,
}

impl CommandExtractor {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl TextExtractor for CommandExtractor {
    fn extract(&self, image: &[u8]) -> Result<String, ToxError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ToxError::ExtractionFailed(format!("cannot start {}: {e}", self.program)))?;

        let mut stdin = child.stdin.take().expect("stdin is piped");
        let image = image.to_vec();
        let writer = std::thread::spawn(move || {
            // A program that stops reading early closes the pipe; that is not our error.
            let _ = stdin.write_all(&image);
        });
        let output = child
            .wait_with_output()
            .map_err(|e| ToxError::ExtractionFailed(format!("{} did not finish: {e}", self.program)))?;
        let _ = writer.join();

        if !output.status.success() {
            return Err(ToxError::ExtractionFailed(format!(
                "{} exited with {}",
                self.program, output.status
            )));
        }
        String::from_utf8(output.stdout)
            .map_err(|_| ToxError::ExtractionFailed(format!("{} produced non-UTF-8 output", self.program)))
    }
}

/// Fixed-output extractor for tests and demos.
#[derive(Debug, Clone)]
pub struct StubExtractor {
    result: Result<String, String>,
}

impl StubExtractor {
    pub fn new(text: impl Into<String>) -> Self {
        Self { result: Ok(text.into()) }
    }

    pub fn failing(message: impl Into<String>) -> Self {
        Self {
            result: Err(message.into()),
        }
    }
}

impl TextExtractor for StubExtractor {
    fn extract(&self, _image: &[u8]) -> Result<String, ToxError> {
        self.result.clone().map_err(ToxError::ExtractionFailed)
    }
}
