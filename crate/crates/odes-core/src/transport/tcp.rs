//! TCP fabric: a full mesh of server nodes plus the client, each pair
//! joined by one duplex connection. Frames are length-prefixed with the
//! same message encoding the simulator uses, so a protocol run ends in
//! the same state on either fabric.

use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{OdesError, Result};
use crate::message::ServerMessage;
use crate::server::{Outbound, ServerNode, ServerState};
use crate::transport::{ClusterLink, NodeId, CLIENT_NODE_ID};

/// Version handshake exchanged on connect.
pub const HANDSHAKE_MAGIC: &[u8; 8] = b"ODESWP01";

const MAX_FRAME_BYTES: u32 = 64 << 20;

#[derive(Debug, Clone, Copy)]
pub struct TcpConfig {
    /// Client-side deadline for one reply; a silent server surfaces as
    /// `ProtocolTimeout`.
    pub timeout: Duration,
}

impl Default for TcpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(5),
        }
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes);
    if len == 0 || len > MAX_FRAME_BYTES {
        return Err(OdesError::MalformedMessage(format!("frame length {len}")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

fn send_handshake(stream: &mut TcpStream, own_id: NodeId) -> Result<()> {
    stream.write_all(HANDSHAKE_MAGIC)?;
    stream.write_all(&own_id.to_be_bytes())?;
    Ok(())
}

fn recv_handshake(stream: &mut TcpStream) -> Result<NodeId> {
    let mut magic = [0u8; 8];
    stream.read_exact(&mut magic)?;
    if &magic != HANDSHAKE_MAGIC {
        return Err(OdesError::Protocol("bad handshake magic".into()));
    }
    let mut id = [0u8; 2];
    stream.read_exact(&mut id)?;
    Ok(NodeId::from_be_bytes(id))
}

enum Input {
    Net(NodeId, ServerMessage),
    Stop,
}

/// Handle over the in-process server threads; shutting down returns the
/// final server states (in id order) for persistence or hashing.
pub struct TcpCluster {
    threads: Vec<JoinHandle<Result<ServerState>>>,
    stops: Vec<mpsc::Sender<Input>>,
    addrs: Vec<SocketAddr>,
}

impl TcpCluster {
    /// Boots one thread per server state on loopback and returns the
    /// already-connected client link alongside the cluster handle.
    pub fn launch(states: Vec<ServerState>, cfg: TcpConfig) -> Result<(TcpCluster, TcpClientLink)> {
        let m = states.len();
        if m == 0 {
            return Err(OdesError::Config("cannot launch an empty cluster".into()));
        }
        let mut listeners = Vec::with_capacity(m);
        let mut addrs = Vec::with_capacity(m);
        for _ in 0..m {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            addrs.push(listener.local_addr()?);
            listeners.push(listener);
        }

        let mut threads = Vec::with_capacity(m);
        let mut stops = Vec::with_capacity(m);
        for (i, state) in states.into_iter().enumerate() {
            let listener = listeners.remove(0);
            let peer_addrs = addrs.clone();
            let (tx, rx) = mpsc::channel::<Input>();
            stops.push(tx.clone());
            threads.push(std::thread::spawn(move || {
                server_main(state, i as NodeId, listener, peer_addrs, tx, rx)
            }));
        }

        let mut conns = Vec::with_capacity(m);
        for (i, addr) in addrs.iter().enumerate() {
            let mut stream = TcpStream::connect(addr)
                .map_err(|e| OdesError::ConnectionLost(format!("connect to server {i}: {e}")))?;
            stream.set_nodelay(true)?;
            send_handshake(&mut stream, CLIENT_NODE_ID)?;
            let peer = recv_handshake(&mut stream)?;
            if peer != i as NodeId {
                return Err(OdesError::Protocol(format!(
                    "server at {addr} identified as {peer}, expected {i}"
                )));
            }
            stream.set_read_timeout(Some(cfg.timeout))?;
            let reader = stream.try_clone()?;
            conns.push(ClientConn {
                reader,
                writer: BufWriter::new(stream),
            });
        }

        Ok((
            TcpCluster {
                threads,
                stops,
                addrs,
            },
            TcpClientLink { conns, messages: 0 },
        ))
    }

    pub fn server_addrs(&self) -> &[SocketAddr] {
        &self.addrs
    }

    pub fn shutdown(self) -> Result<Vec<ServerState>> {
        for stop in &self.stops {
            // a server that already exited has closed its channel
            let _ = stop.send(Input::Stop);
        }
        let mut states = Vec::with_capacity(self.threads.len());
        for thread in self.threads {
            let state = thread
                .join()
                .map_err(|_| OdesError::Protocol("server thread panicked".into()))??;
            states.push(state);
        }
        states.sort_by_key(ServerState::server_id);
        Ok(states)
    }
}

fn server_main(
    state: ServerState,
    own_id: NodeId,
    listener: TcpListener,
    addrs: Vec<SocketAddr>,
    tx: mpsc::Sender<Input>,
    rx: mpsc::Receiver<Input>,
) -> Result<ServerState> {
    let m = addrs.len();
    let mut writers: Vec<Option<BufWriter<TcpStream>>> = (0..m).map(|_| None).collect();
    let mut client_writer: Option<BufWriter<TcpStream>> = None;

    let mut register = |peer: NodeId, stream: TcpStream| -> Result<()> {
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let reader_tx = tx.clone();
        std::thread::spawn(move || reader_main(peer, read_half, reader_tx));
        let writer = BufWriter::new(stream);
        if peer == CLIENT_NODE_ID {
            client_writer = Some(writer);
        } else {
            writers[peer as usize] = Some(writer);
        }
        Ok(())
    };

    // dial every lower-id server; they are already listening
    for (j, addr) in addrs.iter().enumerate().take(own_id as usize) {
        let mut stream = TcpStream::connect(addr)
            .map_err(|e| OdesError::ConnectionLost(format!("server {own_id} to {j}: {e}")))?;
        send_handshake(&mut stream, own_id)?;
        let peer = recv_handshake(&mut stream)?;
        if peer != j as NodeId {
            return Err(OdesError::Protocol(format!(
                "peer {j} identified as {peer}"
            )));
        }
        register(peer, stream)?;
    }

    // accept the higher-id servers and the client; connections failing
    // the handshake are dropped without counting
    let mut expected = (m - 1 - own_id as usize) + 1;
    while expected > 0 {
        let (mut stream, _) = listener.accept()?;
        let peer = match recv_handshake(&mut stream) {
            Ok(peer) => peer,
            Err(_) => {
                let _ = stream.shutdown(Shutdown::Both);
                continue;
            }
        };
        send_handshake(&mut stream, own_id)?;
        register(peer, stream)?;
        expected -= 1;
    }

    let mut node = ServerNode::new(state);
    let result = serve_loop(
        &mut node,
        own_id,
        &rx,
        &tx,
        &mut writers,
        &mut client_writer,
    );

    for writer in writers.iter().flatten() {
        let _ = writer.get_ref().shutdown(Shutdown::Both);
    }
    if let Some(w) = &client_writer {
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
    result.map(|_| node.into_state())
}

fn serve_loop(
    node: &mut ServerNode,
    own_id: NodeId,
    rx: &mpsc::Receiver<Input>,
    tx: &mpsc::Sender<Input>,
    writers: &mut [Option<BufWriter<TcpStream>>],
    client_writer: &mut Option<BufWriter<TcpStream>>,
) -> Result<()> {
    let mut out = Vec::new();
    loop {
        let input = rx
            .recv()
            .map_err(|_| OdesError::ConnectionLost("input channel".into()))?;
        let (_from, msg) = match input {
            Input::Stop => return Ok(()),
            Input::Net(from, msg) => (from, msg),
        };
        out.clear();
        node.handle_message(msg, &mut out)?;
        let mut touched_client = false;
        let mut touched_peers = false;
        for o in out.drain(..) {
            match o {
                Outbound::ToClient(m) => {
                    let w = client_writer
                        .as_mut()
                        .ok_or_else(|| OdesError::ConnectionLost("client not connected".into()))?;
                    write_frame(w, &m.encode())?;
                    touched_client = true;
                }
                Outbound::Broadcast(m) => {
                    let payload = m.encode();
                    for w in writers.iter_mut().flatten() {
                        write_frame(w, &payload)?;
                    }
                    // deliver to self through the same queue the peers use
                    let _ = tx.send(Input::Net(own_id, m));
                    touched_peers = true;
                }
            }
        }
        if touched_client {
            client_writer.as_mut().unwrap().flush()?;
        }
        if touched_peers {
            for w in writers.iter_mut().flatten() {
                w.flush()?;
            }
        }
    }
}

fn reader_main(peer: NodeId, mut stream: TcpStream, tx: mpsc::Sender<Input>) {
    loop {
        let Ok(payload) = read_frame(&mut stream) else {
            return;
        };
        let Ok(msg) = ServerMessage::decode(&payload) else {
            return;
        };
        if tx.send(Input::Net(peer, msg)).is_err() {
            return;
        }
    }
}

struct ClientConn {
    reader: TcpStream,
    writer: BufWriter<TcpStream>,
}

/// Client end of the TCP fabric; implements the same link contract as
/// the simulator.
pub struct TcpClientLink {
    conns: Vec<ClientConn>,
    messages: u64,
}

impl ClusterLink for TcpClientLink {
    fn server_count(&self) -> usize {
        self.conns.len()
    }

    fn send(&mut self, to: NodeId, msg: &ServerMessage) -> Result<()> {
        let conn = self
            .conns
            .get_mut(to as usize)
            .ok_or(OdesError::UnknownRecipient(to))?;
        write_frame(&mut conn.writer, &msg.encode())?;
        self.messages += 1;
        Ok(())
    }

    fn exchange(&mut self) -> Result<Vec<ServerMessage>> {
        for conn in &mut self.conns {
            conn.writer.flush()?;
        }
        let mut replies = Vec::with_capacity(self.conns.len());
        for (id, conn) in self.conns.iter_mut().enumerate() {
            let payload = read_frame(&mut conn.reader).map_err(|e| match e {
                OdesError::Io(ioe)
                    if matches!(
                        ioe.kind(),
                        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                    ) =>
                {
                    OdesError::ProtocolTimeout(format!("server {id} sent no reply in time"))
                }
                OdesError::Io(ioe) if ioe.kind() == std::io::ErrorKind::UnexpectedEof => {
                    OdesError::ConnectionLost(format!("server {id} closed the connection"))
                }
                other => other,
            })?;
            replies.push(ServerMessage::decode(&payload)?);
            self.messages += 1;
        }
        Ok(replies)
    }

    fn messages_total(&self) -> u64 {
        self.messages
    }
}

impl Drop for TcpClientLink {
    fn drop(&mut self) {
        for conn in &self.conns {
            let _ = conn.reader.shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ClientSession;
    use crate::message::RankPredicate;
    use crate::rng::SeededRandomSource;
    use crate::sharing::MaskParams;

    fn fresh_states(m: usize) -> (MaskParams, Vec<ServerState>) {
        let params = MaskParams::new(1_000_000_000_000, 40, m).unwrap();
        let states = (0..m).map(|j| ServerState::new(j as u16, params)).collect();
        (params, states)
    }

    #[test]
    fn end_to_end_over_loopback() {
        let (params, states) = fresh_states(3);
        let (cluster, mut link) = TcpCluster::launch(states, TcpConfig::default()).unwrap();
        let mut session = ClientSession::new(params, Box::new(SeededRandomSource::new(42)));

        let records: Vec<(String, i64)> = [("feb", 12_000i64), ("jan", 8_000), ("apr", 14_000)]
            .map(|(k, v)| (k.to_string(), v))
            .into();
        session.init_dataset(&mut link, &records).unwrap();
        let (_, rank) = session.insert_record(&mut link, "may", 11_000).unwrap();
        assert_eq!(rank, 1);
        session.insert_record(&mut link, "mar", 13_000).unwrap();

        let all = session.query_ranks(&mut link, RankPredicate::All).unwrap();
        let values: Vec<i64> = all.iter().map(|r| r.value).collect();
        assert_eq!(values, vec![8_000, 11_000, 12_000, 13_000, 14_000]);
        assert_eq!(
            session.compare_ephemeral(&mut link, 11_000, 4).unwrap(),
            std::cmp::Ordering::Less
        );

        drop(link);
        let states = cluster.shutdown().unwrap();
        assert!(states.iter().all(|s| s.record_count() == 5));
        assert!(states.windows(2).all(|w| w[0].index() == w[1].index()));
    }

    #[test]
    fn bad_handshake_is_dropped_and_cluster_survives() {
        let (params, states) = fresh_states(2);
        let (cluster, link_holder) = {
            // stash the link while we poke a raw connection at server 0
            let (cluster, link) = TcpCluster::launch(states, TcpConfig::default()).unwrap();
            (cluster, link)
        };
        let mut rogue = TcpStream::connect(cluster.server_addrs()[0]).unwrap();
        rogue.write_all(b"NOTODES!").unwrap();
        rogue.write_all(&[0, 0]).unwrap();
        rogue
            .set_read_timeout(Some(Duration::from_secs(5)))
            .unwrap();
        let mut buf = [0u8; 1];
        // server must close the rogue connection
        assert_eq!(rogue.read(&mut buf).unwrap_or(0), 0);

        let mut link = link_holder;
        let mut session = ClientSession::new(params, Box::new(SeededRandomSource::new(1)));
        session.init_dataset(&mut link, &[("k".into(), 5)]).unwrap();
        drop(link);
        cluster.shutdown().unwrap();
    }

    #[test]
    fn silent_server_yields_protocol_timeout() {
        // a bare listener that handshakes and then ignores everything
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let _ = recv_handshake(&mut stream);
            let _ = send_handshake(&mut stream, 0);
            std::thread::sleep(Duration::from_secs(30));
        });

        let mut stream = TcpStream::connect(addr).unwrap();
        send_handshake(&mut stream, CLIENT_NODE_ID).unwrap();
        recv_handshake(&mut stream).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_millis(200)))
            .unwrap();
        let reader = stream.try_clone().unwrap();
        let mut link = TcpClientLink {
            conns: vec![ClientConn {
                reader,
                writer: BufWriter::new(stream),
            }],
            messages: 0,
        };

        link.send(
            0,
            &ServerMessage::DeleteRecord {
                rid: crate::index::RecordId(0),
            },
        )
        .unwrap();
        match link.exchange() {
            Err(OdesError::ProtocolTimeout(_)) => {}
            other => panic!("expected timeout, got {other:?}"),
        }
    }
}
