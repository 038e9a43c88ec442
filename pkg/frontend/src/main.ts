// Entry point: wires the gateway client to the two views and keeps the
// connection badge honest. All state lives on the gateway; reloading this
// page rebuilds everything from /session and /offline.

import { GatewayClient, type LiveMessage } from "./api";
import { LiveView } from "./live";
import { OfflineView } from "./offline";

function must(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

const client = new GatewayClient(window.location.origin);
const liveRoot = must("view-live");
const offlineRoot = must("view-offline");
const tabLive = must("tab-live");
const tabOffline = must("tab-offline");
const badge = must("conn-badge");

const live = new LiveView(liveRoot, client);
const offline = new OfflineView(offlineRoot, client);

function showTab(which: "live" | "offline"): void {
  liveRoot.hidden = which !== "live";
  offlineRoot.hidden = which !== "offline";
  tabLive.classList.toggle("active", which === "live");
  tabOffline.classList.toggle("active", which === "offline");
  if (which === "offline") void offline.refreshSessions();
}

tabLive.addEventListener("click", () => showTab("live"));
tabOffline.addEventListener("click", () => showTab("offline"));

client.connectLive(
  (msg: LiveMessage) => live.handleMessage(msg),
  (connected: boolean) => {
    badge.textContent = connected ? "connected" : "reconnecting";
    badge.classList.toggle("on", connected);
  },
);

void live.resync();
showTab("live");
