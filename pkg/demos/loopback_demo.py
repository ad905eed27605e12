"""Real sockets: a client and server tunnel on loopback carrying a TCP echo session."""
import asyncio
import os

from mimictun import synth, timing
from mimictun.tunnel import ChannelConfig, Tunnel, format_status


async def main():
    profile = synth.synchro_profile(seed=0)
    model = timing.fit(profile.delay_corpus.delays)

    async def echo(reader, writer):
        while data := await reader.read(4096):
            writer.write(data)
        writer.close()

    target = await asyncio.start_server(echo, "127.0.0.1", 0)
    server = Tunnel(ChannelConfig(profile, model, "server", None, ("127.0.0.1", 0),
                                  target=target.sockets[0].getsockname()))
    await server.start()
    client = Tunnel(ChannelConfig(profile, model, "client", server.local_address, ("127.0.0.1", 0), local_port=0))
    await client.start()

    reader, writer = await asyncio.open_connection(*client.tcp_address)
    data = os.urandom(1024)
    writer.write(data)
    back = await asyncio.wait_for(reader.readexactly(len(data)), 60)
    await asyncio.sleep(1)
    print("echo intact:", back == data)
    print(format_status(client.status()))
    writer.close()
    client.stop()
    server.stop()
    target.close()


asyncio.run(main())
