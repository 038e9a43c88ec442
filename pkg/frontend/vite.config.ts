import { defineConfig } from "vitest/config";

export default defineConfig({
  build: { target: "es2022" },
  server: {
    // dev-mode convenience: forward API calls to a locally running gateway
    proxy: {
      "/session": "http://127.0.0.1:8765",
      "/stimulus": "http://127.0.0.1:8765",
      "/annotation": "http://127.0.0.1:8765",
      "/offline": "http://127.0.0.1:8765",
      "/live": { target: "ws://127.0.0.1:8765", ws: true },
    },
  },
  test: {
    environment: "node",
    testTimeout: 15000,
  },
});
