//! Framed message links between the manager and its workers.
//!
//! Every link moves encoded frames, in-process or across a pipe, so the
//! byte counters mean the same thing for both.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::protocol::{read_frame, write_frame, Message};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Image-map payload only (see [`Message::map_bytes`]).
    pub map_bytes_sent: u64,
    pub map_bytes_received: u64,
}

impl LinkCounters {
    fn on_send(&mut self, frame: &[u8], msg: &Message) {
        self.frames_sent += 1;
        self.bytes_sent += frame.len() as u64;
        self.map_bytes_sent += msg.map_bytes() as u64;
    }

    fn on_recv(&mut self, frame_len: usize, msg: &Message) {
        self.frames_received += 1;
        self.bytes_received += frame_len as u64 + 4;
        self.map_bytes_received += msg.map_bytes() as u64;
    }
}

pub trait Link: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    /// Blocks for the next message; `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message>;
    fn counters(&self) -> LinkCounters;
}

/// One end of an in-process link.
pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    counters: LinkCounters,
}

/// Two connected in-process link ends.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        ChannelLink {
            tx: a_tx,
            rx: a_rx,
            counters: LinkCounters::default(),
        },
        ChannelLink {
            tx: b_tx,
            rx: b_rx,
            counters: LinkCounters::default(),
        },
    )
}

fn recv_frame(rx: &Receiver<Vec<u8>>, timeout: Option<Duration>) -> std::result::Result<Vec<u8>, RecvTimeoutError> {
    match timeout {
        Some(t) => rx.recv_timeout(t),
        None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
    }
}

fn link_error(e: RecvTimeoutError) -> Error {
    match e {
        RecvTimeoutError::Timeout => Error::Protocol("timed out waiting for a message".into()),
        RecvTimeoutError::Disconnected => Error::Protocol("peer disconnected".into()),
    }
}

impl Link for ChannelLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = msg.encode();
        self.counters.on_send(&frame, msg);
        self.tx
            .send(frame)
            .map_err(|_| Error::Protocol("peer disconnected".into()))
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message> {
        let frame = recv_frame(&self.rx, timeout).map_err(link_error)?;
        let msg = Message::decode(&frame[4..])?;
        self.counters.on_recv(frame.len() - 4, &msg);
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}

/// Manager end of a link to a child process speaking frames on stdio.
pub struct ProcessLink {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    rx: Receiver<Result<Vec<u8>>>,
    counters: LinkCounters,
}

impl ProcessLink {
    pub fn spawn(exe: &Path, args: &[&str]) -> Result<Self> {
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::file(exe, e))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, rx) = channel();
        thread::spawn(move || loop {
            match read_frame(&mut stdout) {
                Ok(Some(body)) => {
                    if tx.send(Ok(body)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        Ok(ProcessLink {
            child,
            stdin: Some(stdin),
            rx,
            counters: LinkCounters::default(),
        })
    }
}

impl Link for ProcessLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = msg.encode();
        self.counters.on_send(&frame, msg);
        let stdin = self.stdin.as_mut().expect("stdin open until drop");
        write_frame(stdin, &frame)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message> {
        let body = match timeout {
            Some(t) => self.rx.recv_timeout(t),
            None => self.rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        }
        .map_err(link_error)??;
        let msg = Message::decode(&body)?;
        self.counters.on_recv(body.len(), &msg);
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}

impl Drop for ProcessLink {
    fn drop(&mut self) {
        // Closing stdin ends the worker loop; reap it so no zombie remains.
        drop(self.stdin.take());
        for _ in 0..200 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Worker end of a stdio link.
pub struct StdioLink<R: Read + Send, W: Write + Send> {
    input: R,
    output: W,
    counters: LinkCounters,
}

impl<R: Read + Send, W: Write + Send> StdioLink<R, W> {
    pub fn new(input: R, output: W) -> Self {
        StdioLink {
            input,
            output,
            counters: LinkCounters::default(),
        }
    }
}

impl<R: Read + Send, W: Write + Send> Link for StdioLink<R, W> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = msg.encode();
        self.counters.on_send(&frame, msg);
        write_frame(&mut self.output, &frame)
    }

    fn recv(&mut self, _timeout: Option<Duration>) -> Result<Message> {
        let body = read_frame(&mut self.input)?.ok_or_else(|| Error::Protocol("manager closed the link".into()))?;
        let msg = Message::decode(&body)?;
        self.counters.on_recv(body.len(), &msg);
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_link_counts_bytes() {
        let (mut a, mut b) = channel_pair();
        let msg = Message::Ack { k: 7 };
        a.send(&msg).unwrap();
        assert_eq!(b.recv(Some(Duration::from_secs(1))).unwrap(), msg);
        assert_eq!(a.counters().bytes_sent, b.counters().bytes_received);
        assert_eq!(a.counters().bytes_sent, msg.encode().len() as u64);
    }

    #[test]
    fn channel_link_times_out() {
        let (_a, mut b) = channel_pair();
        assert!(b.recv(Some(Duration::from_millis(10))).is_err());
    }
}
