//! Line-delimited JSON oracle protocol: a client usable as an
//! [`ExpansionOracle`] over TCP or a child process's stdio, and a server loop
//! that exposes any local oracle plus stock set through the same protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fingerprint::Fingerprint;
use crate::problem::{rank_and_truncate, ExpansionOracle, Item, OracleConfig, OracleError, StockSet, TemplateAction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Expand { id: String, k: usize },
    Fingerprint { id: String },
    InStock { id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReactant {
    pub id: String,
    pub fp_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTemplate {
    pub template_id: String,
    pub fp_b64: String,
    pub p: f64,
    pub reactants: Vec<WireReactant>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<WireTemplate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn error(msg: impl Into<String>) -> Self {
        Response {
            ok: false,
            error: Some(msg.into()),
            ..Response::default()
        }
    }
}

/// Where the remote oracle lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp:<host>:<port>`
    Tcp(String),
    /// `cmd:<program> [args...]`, spoken over the child's stdin/stdout.
    Command(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(OracleError::Unavailable("empty tcp address".into()));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(OracleError::Unavailable("empty command".into()));
            }
            return Ok(Endpoint::Command(argv));
        }
        Err(OracleError::Unavailable(format!(
            "endpoint must start with tcp: or cmd:, got {s:?}"
        )))
    }
}

struct Conn {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    broken: bool,
}

impl Conn {
    fn open(ep: &Endpoint, timeout: Option<Duration>) -> Result<Self, OracleError> {
        let unavailable = |e: std::io::Error| OracleError::Unavailable(e.to_string());
        match ep {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(unavailable)?;
                stream.set_read_timeout(timeout).map_err(unavailable)?;
                stream.set_nodelay(true).map_err(unavailable)?;
                let read = stream.try_clone().map_err(unavailable)?;
                Ok(Conn {
                    reader: BufReader::new(Box::new(read)),
                    writer: Box::new(stream),
                    child: None,
                    broken: false,
                })
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(unavailable)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Conn {
                    reader: BufReader::new(Box::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                    broken: false,
                })
            }
        }
    }

    fn call(&mut self, req: &Request) -> Result<Response, OracleError> {
        if self.broken {
            return Err(OracleError::Unavailable("connection previously failed".into()));
        }
        let res = self.round_trip(req);
        if matches!(res, Err(OracleError::Unavailable(_))) {
            self.broken = true;
        }
        let resp = res?;
        if !resp.ok {
            return Err(OracleError::Remote(resp.error.unwrap_or_else(|| "unspecified error".into())));
        }
        Ok(resp)
    }

    fn round_trip(&mut self, req: &Request) -> Result<Response, OracleError> {
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        let io = |e: std::io::Error| OracleError::Unavailable(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf).map_err(io)?;
        if n == 0 {
            return Err(OracleError::Unavailable("oracle closed the connection".into()));
        }
        serde_json::from_str(buf.trim_end()).map_err(|e| OracleError::Protocol(format!("bad response line: {e}")))
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client for the line protocol. Holds a small pool of connections; each
/// connection carries one request at a time.
pub struct RemoteOracle {
    conns: Vec<Mutex<Conn>>,
    next: AtomicUsize,
}

impl RemoteOracle {
    pub fn connect(ep: &Endpoint, connections: usize) -> Result<Self, OracleError> {
        Self::connect_with_timeout(ep, connections, Some(Duration::from_secs(120)))
    }

    pub fn connect_with_timeout(ep: &Endpoint, connections: usize, timeout: Option<Duration>) -> Result<Self, OracleError> {
        let conns = (0..connections.max(1))
            .map(|_| Conn::open(ep, timeout).map(Mutex::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RemoteOracle {
            conns,
            next: AtomicUsize::new(0),
        })
    }

    fn call(&self, req: &Request) -> Result<Response, OracleError> {
        let i = self.next.fetch_add(1, Ordering::Relaxed) % self.conns.len();
        let mut conn = self.conns[i]
            .lock()
            .map_err(|_| OracleError::Unavailable("connection lock poisoned".into()))?;
        conn.call(req)
    }

    pub fn in_stock(&self, id: &str) -> Result<bool, OracleError> {
        let resp = self.call(&Request::InStock { id: id.into() })?;
        resp.member.ok_or_else(|| OracleError::Protocol("in_stock response without member".into()))
    }
}

fn decode_fp(b64: &str, what: &str) -> Result<Fingerprint, OracleError> {
    Fingerprint::from_base64(b64).map_err(|e| OracleError::Protocol(format!("{what}: {e}")))
}

/// Converts and checks a wire expansion, then re-sorts and truncates so a
/// sloppy server cannot break the ordering contract.
pub fn decode_templates(product: &str, templates: Vec<WireTemplate>, k: usize) -> Result<Vec<TemplateAction>, OracleError> {
    let mut out = Vec::with_capacity(templates.len());
    for t in templates {
        if !t.p.is_finite() {
            return Err(OracleError::Protocol(format!("template {}: non-finite probability", t.template_id)));
        }
        let reactants = t
            .reactants
            .into_iter()
            .map(|r| {
                let fp = decode_fp(&r.fp_b64, &r.id)?;
                Item::new(r.id, fp).map_err(|e| OracleError::Protocol(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let action = TemplateAction {
            fingerprint: decode_fp(&t.fp_b64, &t.template_id)?,
            template_id: t.template_id,
            probability: t.p,
            reactants,
        };
        action.validate(product).map_err(|e| OracleError::Protocol(e.to_string()))?;
        out.push(action);
    }
    Ok(rank_and_truncate(out, k))
}

impl ExpansionOracle for RemoteOracle {
    fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
        let resp = self.call(&Request::Expand {
            id: item.id.clone(),
            k: cfg.k,
        })?;
        let templates = resp
            .templates
            .ok_or_else(|| OracleError::Protocol("expand response without templates".into()))?;
        decode_templates(&item.id, templates, cfg.k)
    }

    fn item(&self, id: &str) -> Result<Item, OracleError> {
        let resp = self.call(&Request::Fingerprint { id: id.into() })?;
        let bits = resp
            .bits_b64
            .ok_or_else(|| OracleError::Protocol("fingerprint response without bits_b64".into()))?;
        Item::new(id, decode_fp(&bits, id)?).map_err(|e| OracleError::Protocol(e.to_string()))
    }
}

/// Answers one request line. Malformed input yields an error response.
pub fn handle_line<O: ExpansionOracle + ?Sized>(line: &str, oracle: &O, stock: &StockSet) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Response::error(format!("malformed request: {e}")),
    };
    match req {
        Request::Expand { id, k } => {
            let cfg = match OracleConfig::new(k) {
                Ok(c) => c,
                Err(e) => return Response::error(e.to_string()),
            };
            let result = oracle.item(&id).and_then(|item| oracle.expand(&item, &cfg));
            match result {
                Ok(actions) => Response {
                    ok: true,
                    templates: Some(
                        actions
                            .into_iter()
                            .map(|a| WireTemplate {
                                template_id: a.template_id,
                                fp_b64: a.fingerprint.to_base64(),
                                p: a.probability,
                                reactants: a
                                    .reactants
                                    .into_iter()
                                    .map(|r| WireReactant {
                                        fp_b64: r.fingerprint.to_base64(),
                                        id: r.id,
                                    })
                                    .collect(),
                            })
                            .collect(),
                    ),
                    ..Response::default()
                },
                Err(e) => Response::error(e.to_string()),
            }
        }
        Request::Fingerprint { id } => match oracle.item(&id) {
            Ok(item) => Response {
                ok: true,
                bits_b64: Some(item.fingerprint.to_base64()),
                ..Response::default()
            },
            Err(e) => Response::error(e.to_string()),
        },
        Request::InStock { id } => Response {
            ok: true,
            member: Some(stock.contains(&id)),
            ..Response::default()
        },
    }
}

/// Serves requests until the reader hits end of input. Only I/O errors end
/// the loop; bad requests get an error line.
pub fn serve<O, R, W>(oracle: &O, stock: &StockSet, reader: R, mut writer: W) -> std::io::Result<()>
where
    O: ExpansionOracle + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(&line, oracle, stock);
        let mut out = serde_json::to_string(&resp).expect("responses serialize");
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp<O>(listener: TcpListener, oracle: std::sync::Arc<O>, stock: std::sync::Arc<StockSet>) -> std::io::Result<()>
where
    O: ExpansionOracle + 'static,
{
    for stream in listener.incoming() {
        let stream = stream?;
        let oracle = oracle.clone();
        let stock = stock.clone();
        std::thread::spawn(move || {
            let Ok(read) = stream.try_clone() else { return };
            let _ = serve(&*oracle, &stock, BufReader::new(read), stream);
        });
    }
    Ok(())
}
