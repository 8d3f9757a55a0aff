import { boot } from "./store.js";

const rootEl = document.getElementById("app");
if (rootEl) {
  boot(rootEl);
}
