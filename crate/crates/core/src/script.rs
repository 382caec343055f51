//! The machine script language: one instruction per line, operands
//! separated by whitespace. `$name` is a register; anything else is a
//! literal, double-quoted when it holds spaces (`\"`, `\\`, `\n`, `\t`
//! escapes). `#` at the start of a token begins a comment. Registers hold a
//! string, a channel or a bundle. The full grammar is in docs/script.md.

use std::collections::HashMap;
use std::time::Duration;

use crate::bundle::{Bundle, CodeSection, Datum, DatumContent};
use crate::channel::{ChannelEnd, Connector};
use crate::crypto::{Certificate, SIGNATURE_SCHEME};
use crate::error::{Error, Result};
use crate::guid::Guid;
use crate::machine::MachineApi;
use crate::rights::Rights;
use crate::tsscp::ClientHandle;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Bare(String),
    Quoted(String),
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Token>> {
    let err = |m: &str| Error::Script {
        line: lineno,
        message: m.to_string(),
    };
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            None | Some('#') => break,
            Some('"') => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(err("unterminated string")),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            _ => return Err(err("bad escape")),
                        },
                        Some(c) => s.push(c),
                    }
                }
                out.push(Token::Quoted(s));
            }
            Some(_) => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() {
                        break;
                    }
                    s.push(c);
                    chars.next();
                }
                out.push(Token::Bare(s));
            }
        }
    }
    Ok(out)
}

/// A register name or a literal string.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Val {
    Reg(String),
    Lit(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    Set(String, Val),
    Concat(String, Vec<Val>),
    Default(String),
    Abstract(String, Val),
    Accept(String),
    ConnectLocal(String, Val, Option<Val>),
    ConnectRemote(String, Val, Val, Option<Val>),
    ConnectRaw(String, Val, Val),
    SetResourceName(Val),
    Read(String, String),
    Write(String, Val),
    Close(String),
    StorePut(String, String),
    StoreGet(String, Val),
    StoreRemove(Val),
    SbindPut(Val, Val, Option<Val>),
    SbindGet(String, Val),
    SbindRemove(Val, Val),
    PbindPut(Val, Val, Val),
    PbindRemove(Val),
    VerPut(String, Val, Val),
    VerRemove(Val),
    Datum(String, Val),
    BundleNew(String, Val, Val),
    BundleSet(String, Val, Val),
    FireGuid(String, Val, Option<String>),
    FireBundle(String, String, Option<String>),
    FireRemote(String, Val, String, Option<String>),
    Wire(Val, Val, Val, Val),
    Label(String),
    Jump(String),
    JumpEq(Val, Val, String),
    JumpNe(Val, Val, String),
    Sleep(Val),
    Fail(Val),
    Halt,
}

impl Op {
    fn mnemonic(&self) -> &'static str {
        match self {
            Op::Set(..) => "set",
            Op::Concat(..) => "concat",
            Op::Default(..) => "default",
            Op::Abstract(..) => "abstract",
            Op::Accept(..) => "accept",
            Op::ConnectLocal(..) => "connect_local",
            Op::ConnectRemote(..) => "connect_remote",
            Op::ConnectRaw(..) => "connect_raw",
            Op::SetResourceName(..) => "set_resource_name",
            Op::Read(..) => "read",
            Op::Write(..) => "write",
            Op::Close(..) => "close",
            Op::StorePut(..) => "store_put",
            Op::StoreGet(..) => "store_get",
            Op::StoreRemove(..) => "store_remove",
            Op::SbindPut(..) => "sbind_put",
            Op::SbindGet(..) => "sbind_get",
            Op::SbindRemove(..) => "sbind_remove",
            Op::PbindPut(..) => "pbind_put",
            Op::PbindRemove(..) => "pbind_remove",
            Op::VerPut(..) => "ver_put",
            Op::VerRemove(..) => "ver_remove",
            Op::Datum(..) => "datum",
            Op::BundleNew(..) => "bundle_new",
            Op::BundleSet(..) => "bundle_set",
            Op::FireGuid(..) => "fire_guid",
            Op::FireBundle(..) => "fire_bundle",
            Op::FireRemote(..) => "fire_remote",
            Op::Wire(..) => "wire",
            Op::Label(..) => "label",
            Op::Jump(..) => "jump",
            Op::JumpEq(..) => "jump_eq",
            Op::JumpNe(..) => "jump_ne",
            Op::Sleep(..) => "sleep",
            Op::Fail(..) => "fail",
            Op::Halt => "halt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Instr {
    line: usize,
    op: Op,
}

struct Operands {
    line: usize,
    name: String,
    tokens: std::vec::IntoIter<Token>,
}

impl Operands {
    fn err(&self, m: impl Into<String>) -> Error {
        Error::Script {
            line: self.line,
            message: format!("{}: {}", self.name, m.into()),
        }
    }

    fn reg(&mut self) -> Result<String> {
        match self.tokens.next() {
            Some(Token::Bare(s)) if s.len() > 1 && s.starts_with('$') => Ok(s[1..].to_string()),
            Some(_) => Err(self.err("expected a $register")),
            None => Err(self.err("missing register operand")),
        }
    }

    fn opt_reg(&mut self) -> Result<Option<String>> {
        if self.tokens.as_slice().is_empty() {
            Ok(None)
        } else {
            self.reg().map(Some)
        }
    }

    fn val(&mut self) -> Result<Val> {
        match self.tokens.next() {
            Some(Token::Bare(s)) if s.len() > 1 && s.starts_with('$') => Ok(Val::Reg(s[1..].to_string())),
            Some(Token::Bare(s)) | Some(Token::Quoted(s)) => Ok(Val::Lit(s)),
            None => Err(self.err("missing operand")),
        }
    }

    fn opt_val(&mut self) -> Result<Option<Val>> {
        if self.tokens.as_slice().is_empty() {
            Ok(None)
        } else {
            self.val().map(Some)
        }
    }

    fn word(&mut self) -> Result<String> {
        match self.tokens.next() {
            Some(Token::Bare(s)) if !s.starts_with('$') => Ok(s),
            _ => Err(self.err("expected a label name")),
        }
    }

    fn rest(&mut self) -> Result<Vec<Val>> {
        let mut out = Vec::new();
        while !self.tokens.as_slice().is_empty() {
            out.push(self.val()?);
        }
        Ok(out)
    }

    fn done(&self) -> Result<()> {
        if self.tokens.as_slice().is_empty() {
            Ok(())
        } else {
            Err(self.err("too many operands"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    instrs: Vec<Instr>,
    labels: HashMap<String, usize>,
}

impl Program {
    pub fn parse(text: &str) -> Result<Program> {
        let mut instrs = Vec::new();
        let mut labels = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let mut tokens = tokenize(raw, line)?.into_iter();
            let name = match tokens.next() {
                None => continue,
                Some(Token::Bare(n)) => n,
                Some(Token::Quoted(_)) => {
                    return Err(Error::Script {
                        line,
                        message: "instruction name expected".into(),
                    })
                }
            };
            let mut o = Operands {
                line,
                name: name.clone(),
                tokens,
            };
            let op = match name.as_str() {
                "set" => Op::Set(o.reg()?, o.val()?),
                "concat" => Op::Concat(o.reg()?, o.rest()?),
                "default" => Op::Default(o.reg()?),
                "abstract" => Op::Abstract(o.reg()?, o.val()?),
                "accept" => Op::Accept(o.reg()?),
                "connect_local" => Op::ConnectLocal(o.reg()?, o.val()?, o.opt_val()?),
                "connect_remote" => Op::ConnectRemote(o.reg()?, o.val()?, o.val()?, o.opt_val()?),
                "connect_raw" => Op::ConnectRaw(o.reg()?, o.val()?, o.val()?),
                "set_resource_name" => Op::SetResourceName(o.val()?),
                "read" => Op::Read(o.reg()?, o.reg()?),
                "write" => Op::Write(o.reg()?, o.val()?),
                "close" => Op::Close(o.reg()?),
                "store_put" => Op::StorePut(o.reg()?, o.reg()?),
                "store_get" => Op::StoreGet(o.reg()?, o.val()?),
                "store_remove" => Op::StoreRemove(o.val()?),
                "sbind_put" => Op::SbindPut(o.val()?, o.val()?, o.opt_val()?),
                "sbind_get" => Op::SbindGet(o.reg()?, o.val()?),
                "sbind_remove" => Op::SbindRemove(o.val()?, o.val()?),
                "pbind_put" => Op::PbindPut(o.val()?, o.val()?, o.val()?),
                "pbind_remove" => Op::PbindRemove(o.val()?),
                "ver_put" => Op::VerPut(o.reg()?, o.val()?, o.val()?),
                "ver_remove" => Op::VerRemove(o.val()?),
                "datum" => Op::Datum(o.reg()?, o.val()?),
                "bundle_new" => Op::BundleNew(o.reg()?, o.val()?, o.val()?),
                "bundle_set" => Op::BundleSet(o.reg()?, o.val()?, o.val()?),
                "fire_guid" => Op::FireGuid(o.reg()?, o.val()?, o.opt_reg()?),
                "fire_bundle" => Op::FireBundle(o.reg()?, o.reg()?, o.opt_reg()?),
                "fire_remote" => Op::FireRemote(o.reg()?, o.val()?, o.reg()?, o.opt_reg()?),
                "wire" => Op::Wire(o.val()?, o.val()?, o.val()?, o.val()?),
                "label" => {
                    let l = o.word()?;
                    if labels.insert(l.clone(), instrs.len()).is_some() {
                        return Err(o.err(format!("label {l:?} defined twice")));
                    }
                    Op::Label(l)
                }
                "jump" => Op::Jump(o.word()?),
                "jump_eq" => Op::JumpEq(o.val()?, o.val()?, o.word()?),
                "jump_ne" => Op::JumpNe(o.val()?, o.val()?, o.word()?),
                "sleep" => Op::Sleep(o.val()?),
                "fail" => Op::Fail(o.val()?),
                "halt" => Op::Halt,
                _ => return Err(o.err("unknown instruction")),
            };
            o.done()?;
            instrs.push(Instr { line, op });
        }
        for ins in &instrs {
            if let Op::Jump(l) | Op::JumpEq(_, _, l) | Op::JumpNe(_, _, l) = &ins.op {
                if !labels.contains_key(l) {
                    return Err(Error::Script {
                        line: ins.line,
                        message: format!("unknown label {l:?}"),
                    });
                }
            }
        }
        Ok(Program { instrs, labels })
    }

    pub fn run(&self, api: &MachineApi) -> Result<()> {
        self.run_traced(api, &mut Vec::new())
    }

    /// Runs the program, appending one `line:mnemonic` entry per executed
    /// instruction to `trace`.
    pub fn run_traced(&self, api: &MachineApi, trace: &mut Vec<String>) -> Result<()> {
        let mut regs = Registers::default();
        let mut pc = 0;
        while let Some(ins) = self.instrs.get(pc) {
            trace.push(format!("{}:{}", ins.line, ins.op.mnemonic()));
            pc += 1;
            if let Some(target) = self.step(api, &mut regs, ins)? {
                pc = target;
            }
        }
        Ok(())
    }

    fn step(&self, api: &MachineApi, r: &mut Registers, ins: &Instr) -> Result<Option<usize>> {
        let line = ins.line;
        let jump = |l: &str| Some(self.labels[l]);
        match &ins.op {
            Op::Set(dst, v) => {
                let s = r.str(v, line)?;
                r.put(dst, Value::Str(s));
            }
            Op::Concat(dst, parts) => {
                let mut s = String::new();
                for p in parts {
                    s.push_str(&r.str(p, line)?);
                }
                r.put(dst, Value::Str(s));
            }
            Op::Default(dst) => r.put(dst, Value::Chan(api.default_channel())),
            Op::Abstract(dst, name) => {
                let name = r.str(name, line)?;
                r.put(dst, Value::Chan(api.abstract_channel(&name)));
            }
            Op::Accept(dst) => r.put(dst, Value::Chan(api.accept()?)),
            Op::ConnectLocal(dst, res, prov) => {
                let res = r.str(res, line)?;
                let prov = r.opt_str(prov.as_ref(), line)?;
                let h = api.resource_connect_local(&res, &prov)?;
                r.put(dst, Value::Chan(h.channel));
            }
            Op::ConnectRemote(dst, host, res, prov) => {
                let host = r.str(host, line)?;
                let res = r.str(res, line)?;
                let prov = r.opt_str(prov.as_ref(), line)?;
                let h = api.resource_connect_remote(&host, &res, &prov)?;
                r.put(dst, Value::Chan(h.channel));
            }
            Op::ConnectRaw(dst, host, port) => {
                let host = r.str(host, line)?;
                let port = r.num(port, line)?;
                let port = u16::try_from(port).map_err(|_| script_err(line, "port out of range"))?;
                r.put(dst, Value::Chan(api.resource_connect_raw(&host, port)?));
            }
            Op::SetResourceName(name) => api.set_resource_name(&r.str(name, line)?)?,
            Op::Read(dst, ch) => {
                let msg = r.chan(ch, line)?.read()?;
                r.put(dst, Value::Str(String::from_utf8_lossy(&msg).into_owned()));
            }
            Op::Write(ch, v) => {
                let s = r.str(v, line)?;
                r.chan(ch, line)?.write(s.as_bytes())?;
            }
            Op::Close(ch) => r.chan(ch, line)?.close(),
            Op::StorePut(dst, b) => {
                let g = api.store_put(r.bundle(b, line)?)?;
                r.put(dst, Value::Str(g.to_hex()));
            }
            Op::StoreGet(dst, g) => {
                let g = r.guid(g, line)?;
                r.put(dst, Value::Bundle(Box::new(api.store_get(&g)?)));
            }
            Op::StoreRemove(g) => api.store_remove(&r.guid(g, line)?)?,
            Op::SbindPut(name, g, clue) => {
                let name = r.str(name, line)?;
                let g = r.guid(g, line)?;
                let clue = match clue {
                    Some(c) => Some(r.str(c, line)?),
                    None => None,
                };
                api.sbinder_put(&name, g, clue.as_deref())?;
            }
            Op::SbindGet(dst, name) => {
                let keys = api.sbinder_get(&r.str(name, line)?)?;
                let joined: Vec<String> = keys.iter().map(Guid::to_hex).collect();
                r.put(dst, Value::Str(joined.join(",")));
            }
            Op::SbindRemove(name, g) => {
                let name = r.str(name, line)?;
                api.sbinder_remove(&name, r.guid(g, line)?)?;
            }
            Op::PbindPut(svc, g, n) => {
                let svc = r.str(svc, line)?;
                let g = r.guid(g, line)?;
                let n = r.num(n, line)?;
                api.pbinder_put(&svc, g, n as usize)?;
            }
            Op::PbindRemove(svc) => api.pbinder_remove(&r.str(svc, line)?)?,
            Op::VerPut(dst, cert, rights) => {
                let cert = Certificate::from_hex(&r.str(cert, line)?)?;
                let rights: Rights = r.str(rights, line)?.parse()?;
                let entity = api.ver_put(cert, SIGNATURE_SCHEME, "", rights)?;
                r.put(dst, Value::Str(entity));
            }
            Op::VerRemove(e) => api.ver_remove(&r.str(e, line)?)?,
            Op::Datum(dst, id) => {
                let id = r.str(id, line)?;
                let d = api
                    .bundle()
                    .datum(&id)
                    .ok_or_else(|| script_err(line, format!("no datum {id:?}")))?;
                let v = match &d.content {
                    DatumContent::Text(t) => Value::Str(t.clone()),
                    DatumContent::Bundle(b) => Value::Bundle(b.clone()),
                };
                r.put(dst, v);
            }
            Op::BundleNew(dst, entry, program) => {
                let entry = r.str(entry, line)?;
                let program = r.str(program, line)?;
                r.put(
                    dst,
                    Value::Bundle(Box::new(Bundle::new(CodeSection::script(entry, program)))),
                );
            }
            Op::BundleSet(dst, id, v) => {
                let id = r.str(id, line)?;
                let datum = match v {
                    Val::Reg(name) => match r.get(name, line)? {
                        Value::Bundle(b) => Datum::bundle(id, (**b).clone()),
                        Value::Str(s) => Datum::text(id, s.clone()),
                        Value::Chan(_) => return Err(script_err(line, "cannot store a channel")),
                    },
                    Val::Lit(s) => Datum::text(id, s.clone()),
                };
                match r.regs.get_mut(dst) {
                    Some(Value::Bundle(b)) => b.set_datum(datum),
                    _ => return Err(script_err(line, format!("${dst} is not a bundle"))),
                }
            }
            Op::FireGuid(dst, g, conn) => {
                let h = api.fire_local_guid(&r.guid(g, line)?)?;
                r.put_handle(dst, conn.as_deref(), h);
            }
            Op::FireBundle(dst, b, conn) => {
                let h = api.fire_local_bundle(r.bundle(b, line)?)?;
                r.put_handle(dst, conn.as_deref(), h);
            }
            Op::FireRemote(dst, addr, b, conn) => {
                let addr = r.str(addr, line)?;
                let h = api.fire_remote(&addr, &r.bundle(b, line)?)?;
                r.put_handle(dst, conn.as_deref(), h);
            }
            Op::Wire(pc, pn, sc, sn) => {
                let connector = |v: &Val| -> Result<Connector> { r.str(v, line)?.parse() };
                api.wire_third_party(
                    &connector(pc)?,
                    &r.str(pn, line)?,
                    &connector(sc)?,
                    &r.str(sn, line)?,
                )?;
            }
            Op::Label(_) => {}
            Op::Jump(l) => return Ok(jump(l)),
            Op::JumpEq(a, b, l) => {
                if r.str(a, line)? == r.str(b, line)? {
                    return Ok(jump(l));
                }
            }
            Op::JumpNe(a, b, l) => {
                if r.str(a, line)? != r.str(b, line)? {
                    return Ok(jump(l));
                }
            }
            Op::Sleep(ms) => std::thread::sleep(Duration::from_millis(r.num(ms, line)?)),
            Op::Fail(msg) => return Err(script_err(line, r.str(msg, line)?)),
            Op::Halt => return Ok(Some(self.instrs.len())),
        }
        Ok(None)
    }
}

fn script_err(line: usize, message: impl Into<String>) -> Error {
    Error::Script {
        line,
        message: message.into(),
    }
}

#[derive(Clone)]
enum Value {
    Str(String),
    Chan(ChannelEnd),
    Bundle(Box<Bundle>),
}

#[derive(Default)]
struct Registers {
    regs: HashMap<String, Value>,
}

impl Registers {
    fn put(&mut self, name: &str, v: Value) {
        self.regs.insert(name.to_string(), v);
    }

    fn put_handle(&mut self, chan: &str, conn: Option<&str>, h: ClientHandle) {
        self.put(chan, Value::Chan(h.channel));
        if let Some(c) = conn {
            self.put(c, Value::Str(h.connector.to_string()));
        }
    }

    fn get(&self, name: &str, line: usize) -> Result<&Value> {
        self.regs
            .get(name)
            .ok_or_else(|| script_err(line, format!("${name} is unset")))
    }

    fn str(&self, v: &Val, line: usize) -> Result<String> {
        match v {
            Val::Lit(s) => Ok(s.clone()),
            Val::Reg(name) => match self.get(name, line)? {
                Value::Str(s) => Ok(s.clone()),
                Value::Bundle(b) => Ok(String::from_utf8_lossy(&crate::bundle::canonical_encode(b)).into_owned()),
                Value::Chan(_) => Err(script_err(line, format!("${name} is a channel"))),
            },
        }
    }

    fn opt_str(&self, v: Option<&Val>, line: usize) -> Result<String> {
        v.map(|v| self.str(v, line)).unwrap_or_else(|| Ok(String::new()))
    }

    fn num(&self, v: &Val, line: usize) -> Result<u64> {
        let s = self.str(v, line)?;
        s.trim()
            .parse()
            .map_err(|_| script_err(line, format!("{s:?} is not a number")))
    }

    fn guid(&self, v: &Val, line: usize) -> Result<Guid> {
        let s = self.str(v, line)?;
        s.parse()
            .map_err(|_| script_err(line, format!("{s:?} is not a guid")))
    }

    fn chan(&self, name: &str, line: usize) -> Result<ChannelEnd> {
        match self.get(name, line)? {
            Value::Chan(c) => Ok(c.clone()),
            _ => Err(script_err(line, format!("${name} is not a channel"))),
        }
    }

    fn bundle(&self, name: &str, line: usize) -> Result<Bundle> {
        match self.get(name, line)? {
            Value::Bundle(b) => Ok((**b).clone()),
            Value::Str(s) => crate::bundle::decode(s.as_bytes()),
            Value::Chan(_) => Err(script_err(line, format!("${name} is not a bundle"))),
        }
    }
}
